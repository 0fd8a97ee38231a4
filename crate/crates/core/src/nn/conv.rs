use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Full discrete convolution `h(k) = Σ_i f(i) · g(k − i)` of two sequences,
/// of length `|f| + |g| − 1`.
pub fn conv1d_reference(f: &Tensor, g: &Tensor) -> Result<Tensor> {
    if f.rank() != 1 || g.rank() != 1 {
        return Err(Error::shape("conv1d_reference takes rank-1 inputs"));
    }
    if f.is_empty() || g.is_empty() {
        return Err(Error::Empty("conv1d_reference needs non-empty sequences".into()));
    }
    let (fd, gd) = (f.data(), g.data());
    let n = fd.len() + gd.len() - 1;
    let out = (0..n)
        .map(|k| {
            let lo = k.saturating_sub(gd.len() - 1);
            let hi = k.min(fd.len() - 1);
            (lo..=hi).map(|i| fd[i] * gd[k - i]).sum()
        })
        .collect();
    Ok(Tensor::from_vec(out))
}
