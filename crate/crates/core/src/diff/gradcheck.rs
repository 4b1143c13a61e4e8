use super::{DiffError, Graph, Real, Tensor, Var};

/// A scalar function of a list of input tensors, expressible at any
/// precision. The same definition drives autodiff (f32) and the central
/// difference oracle (f64).
pub trait Objective {
    fn build<T: Real>(&self, g: &mut Graph<T>, inputs: &[Var]) -> Result<Var, DiffError>;
}

/// A built objective: the graph, its input handles and its output.
pub struct Evaluation<T: Real> {
    pub graph: Graph<T>,
    pub inputs: Vec<Var>,
    pub output: Var,
}

/// Build the objective on fresh inputs (trainable leaves or constants).
pub fn evaluate<T: Real, O: Objective + ?Sized>(
    objective: &O,
    inputs: &[Tensor],
    trainable: bool,
) -> Result<Evaluation<T>, DiffError> {
    let mut graph = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| if trainable { graph.leaf(t) } else { graph.constant(t) })
        .collect();
    let output = objective.build(&mut graph, &vars)?;
    Ok(Evaluation {
        graph,
        inputs: vars,
        output,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LeafReport {
    pub index: usize,
    /// ‖g_ad − g_fd‖₂ / max(‖g_fd‖₂, 1e−12)
    pub rel_error: f64,
    pub fd_norm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub leaves: Vec<LeafReport>,
    pub tolerance: f64,
    pub passed: bool,
    pub error: Option<String>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.leaves
            .iter()
            .map(|l| l.rel_error)
            .fold(0.0, f64::max)
    }
}

const FD_STEP: f64 = 1e-3;

/// Compare f32 autodiff gradients against f64 central differences
/// (step 1e-3) for every input tensor.
pub fn finite_diff_check<O: Objective + ?Sized>(
    objective: &O,
    inputs: &[Tensor],
    tolerance: f64,
) -> GradCheckReport {
    match check_inner(objective, inputs) {
        Ok(leaves) => GradCheckReport {
            passed: leaves.iter().all(|l| l.rel_error < tolerance),
            leaves,
            tolerance,
            error: None,
        },
        Err(e) => GradCheckReport {
            leaves: Vec::new(),
            tolerance,
            passed: false,
            error: Some(e.to_string()),
        },
    }
}

fn check_inner<O: Objective + ?Sized>(
    objective: &O,
    inputs: &[Tensor],
) -> Result<Vec<LeafReport>, DiffError> {
    let ev = evaluate::<f32, O>(objective, inputs, true)?;
    let grads = ev.graph.backward(ev.output)?;
    let ad: Vec<Vec<f64>> = ev
        .inputs
        .iter()
        .enumerate()
        .map(|(i, &var)| {
            grads
                .get(var)
                .map(|s| s.iter().map(|&x| x as f64).collect())
                .unwrap_or_else(|| vec![0.0; inputs[i].numel()])
        })
        .collect();

    let base: Vec<Vec<f64>> = inputs.iter().map(Tensor::to_f64).collect();
    let eval64 = |vals: &[Vec<f64>]| -> Result<f64, DiffError> {
        let mut g = Graph::<f64>::new();
        let vars = vals
            .iter()
            .zip(inputs)
            .map(|(v, t)| g.constant_raw(t.shape().to_vec(), v.clone()))
            .collect::<Result<Vec<_>, _>>()?;
        let out = objective.build(&mut g, &vars)?;
        Ok(g.scalar(out))
    };

    let mut reports = Vec::with_capacity(inputs.len());
    let mut work = base.clone();
    for (i, ad_i) in ad.iter().enumerate() {
        let mut fd = vec![0.0; ad_i.len()];
        for (j, slot) in fd.iter_mut().enumerate() {
            let x = base[i][j];
            work[i][j] = x + FD_STEP;
            let plus = eval64(&work)?;
            work[i][j] = x - FD_STEP;
            let minus = eval64(&work)?;
            work[i][j] = x;
            *slot = (plus - minus) / (2.0 * FD_STEP);
        }
        let diff = ad_i
            .iter()
            .zip(&fd)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let fd_norm = fd.iter().map(|x| x * x).sum::<f64>().sqrt();
        reports.push(LeafReport {
            index: i,
            rel_error: diff / fd_norm.max(1e-12),
            fd_norm,
        });
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::CORRUPT_SIGMOID;

    struct Quadratic;
    impl Objective for Quadratic {
        fn build<T: Real>(&self, g: &mut Graph<T>, x: &[Var]) -> Result<Var, DiffError> {
            let sq = g.mul(x[0], x[0])?;
            let s = g.sum(sq)?;
            g.scale(s, 0.5)
        }
    }

    struct SigmoidLoss;
    impl Objective for SigmoidLoss {
        fn build<T: Real>(&self, g: &mut Graph<T>, x: &[Var]) -> Result<Var, DiffError> {
            let s = g.sigmoid(x[0])?;
            g.sum(s)
        }
    }

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::new(vec![1, 4], vec![0.5, -1.0, 2.0, 0.25]).unwrap();
        let r = finite_diff_check(&Quadratic, &[x], 1e-6);
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn corrupted_rule_is_detected() {
        let x = Tensor::new(vec![1, 3], vec![0.1, -0.4, 0.9]).unwrap();
        assert!(finite_diff_check(&SigmoidLoss, &[x.clone()], 1e-4).passed);
        CORRUPT_SIGMOID.with(|c| c.set(true));
        let r = finite_diff_check(&SigmoidLoss, &[x], 1e-4);
        CORRUPT_SIGMOID.with(|c| c.set(false));
        assert!(!r.passed);
        assert!(r.max_rel_error() > 0.5);
    }

    #[test]
    fn build_failure_is_reported() {
        struct Bad;
        impl Objective for Bad {
            fn build<T: Real>(&self, g: &mut Graph<T>, x: &[Var]) -> Result<Var, DiffError> {
                g.matmul(x[0], x[0])
            }
        }
        let x = Tensor::zeros(&[2, 3]);
        let r = finite_diff_check(&Bad, &[x], 1e-4);
        assert!(!r.passed);
        assert!(r.error.unwrap().contains("matmul"));
    }
}
