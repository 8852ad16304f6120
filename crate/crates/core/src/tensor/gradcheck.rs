use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, NodeId, Result, TensorError};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Maximum accepted relative error.
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator, so gradients that are
    /// zero up to rounding compare on an absolute scale.
    pub abs_floor: f64,
    /// Check at most this many (seeded, random) elements of each leaf.
    pub max_elements_per_leaf: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { step: 1e-5, tolerance: 1e-4, abs_floor: 1e-6, max_elements_per_leaf: None, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct LeafCheck {
    pub name: String,
    pub checked: usize,
    /// Elements whose perturbation crossed a kink (abs/relu at 0, sort tie).
    pub excluded: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub leaves: Vec<LeafCheck>,
    pub max_rel_error: f64,
    pub checked: usize,
    pub excluded: usize,
    pub failures: usize,
    pub passed: bool,
}

/// Compares analytic leaf gradients of `root` against central finite
/// differences. Points where the perturbation changes a branch decision are
/// reported as excluded rather than failed. Leaf values are restored before
/// returning.
pub fn grad_check(graph: &mut Graph, root: NodeId, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    if !graph.value(root).is_scalar() {
        return Err(TensorError::RootNotScalar(graph.shape(root).to_vec()));
    }
    graph.recompute()?;
    let grads = graph.backward(root)?;
    let base_sig = graph.branch_signature();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let h = opts.step;

    let mut report = GradCheckReport {
        leaves: Vec::new(),
        max_rel_error: 0.0,
        checked: 0,
        excluded: 0,
        failures: 0,
        passed: true,
    };
    for name in graph.leaf_names() {
        let id = graph.leaf_id(&name).expect("listed leaf");
        let analytic = grads.node(id);
        let n = analytic.numel();
        let elems: Vec<usize> = match opts.max_elements_per_leaf {
            Some(m) if m < n => {
                let mut v = sample(&mut rng, n, m).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        };
        let mut leaf = LeafCheck { name: name.clone(), checked: 0, excluded: 0, max_rel_error: 0.0 };
        for e in elems {
            let x0 = graph.value(id).data()[e];
            graph.set_leaf_element(id, e, x0 + h);
            graph.recompute()?;
            let (fp, sp) = (graph.value(root).item(), graph.branch_signature());
            graph.set_leaf_element(id, e, x0 - h);
            graph.recompute()?;
            let (fm, sm) = (graph.value(root).item(), graph.branch_signature());
            graph.set_leaf_element(id, e, x0);
            if sp != base_sig || sm != base_sig {
                leaf.excluded += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.data()[e];
            let denom = a.abs().max(numeric.abs()).max(opts.abs_floor);
            let rel = (a - numeric).abs() / denom;
            leaf.checked += 1;
            leaf.max_rel_error = leaf.max_rel_error.max(rel);
            if !(rel < opts.tolerance) {
                report.failures += 1;
            }
        }
        report.checked += leaf.checked;
        report.excluded += leaf.excluded;
        report.max_rel_error = report.max_rel_error.max(leaf.max_rel_error);
        report.leaves.push(leaf);
    }
    graph.recompute()?;
    report.passed = report.failures == 0;
    Ok(report)
}
