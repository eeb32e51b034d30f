use ndarray::{Array1, ArrayView1};

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// ln(1 + e^x) without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn log_sum_exp(xs: ArrayView1<'_, f64>) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

pub fn softmax(xs: ArrayView1<'_, f64>) -> Array1<f64> {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e = xs.mapv(|x| (x - max).exp());
    let total = e.sum();
    e / total
}

pub fn log_softmax(xs: ArrayView1<'_, f64>) -> Array1<f64> {
    let lse = log_sum_exp(xs);
    xs.mapv(|x| x - lse)
}

/// Cosine similarity; zero when either vector has zero norm.
pub fn cosine(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (a.dot(&b) / (na * nb)).clamp(-1.0, 1.0)
    }
}
