use super::tape::{grad, Tape, Var};
use super::tensor::Tensor;
use super::EncoderError;

/// Worst central-difference disagreement within one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub index: usize,
    pub entries: usize,
    /// `max |fd - g| / (|g| + 1e-8)` over the tensor.
    pub max_rel_error: f64,
    pub worst_entry: usize,
}

/// Compares reverse-mode gradients of `loss` with central differences of
/// step `h` for every entry of every tensor in `params`.
pub fn check_gradients<L>(
    params: &[Tensor<f64>],
    h: f64,
    loss: L,
) -> Result<Vec<TensorCheck>, EncoderError>
where
    L: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, EncoderError>,
{
    let (_, grads) = grad(params, &loss)?;
    let eval = |ps: &[Tensor<f64>]| grad(ps, &loss).map(|(l, _)| l);
    let mut work = params.to_vec();
    let mut report = Vec::with_capacity(params.len());
    for (i, g) in grads.iter().enumerate() {
        let mut worst = (0.0f64, 0usize);
        for j in 0..g.data.len() {
            let orig = work[i].data[j];
            work[i].data[j] = orig + h;
            let plus = eval(&work)?;
            work[i].data[j] = orig - h;
            let minus = eval(&work)?;
            work[i].data[j] = orig;
            let fd = (plus - minus) / (2.0 * h);
            let rel = (fd - g.data[j]).abs() / (g.data[j].abs() + 1e-8);
            if rel > worst.0 {
                worst = (rel, j);
            }
        }
        report.push(TensorCheck {
            index: i,
            entries: g.data.len(),
            max_rel_error: worst.0,
            worst_entry: worst.1,
        });
    }
    Ok(report)
}
