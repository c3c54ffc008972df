//! Minimal dense-matrix computation with reverse-mode differentiation.
//!
//! Gradients come from a per-forward-pass tape ([`tape`]); every
//! differentiable operation is validated against central finite differences
//! through [`grad_check`].

pub mod tape;
pub mod tensor;

pub use tape::{Gradients, Tape, Var, PROB_EPS};
pub use tensor::Tensor;

/// Mean binary cross entropy between a predicted matrix (entries in (0,1),
/// clamped to [PROB_EPS, 1-PROB_EPS] before the logs) and a constant target
/// matrix with entries in [0,1].
pub fn bce(pred: &Var, target: &Tensor) -> Var {
    let (rows, cols) = pred.shape();
    assert_eq!(
        (rows, cols),
        target.shape(),
        "bce shape mismatch: {}x{} vs {}x{}",
        rows,
        cols,
        target.rows(),
        target.cols()
    );
    let tape_target = constant_on(pred, target.clone());
    let complement = constant_on(pred, target.map(|t| 1.0 - t));
    let ones = constant_on(pred, Tensor::filled(rows, cols, 1.0));
    let p = pred.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let hit = tape_target.hadamard(&p.ln());
    let miss = complement.hadamard(&ones.sub(&p).ln());
    hit.add(&miss).sum_all().scale(-1.0 / (rows * cols) as f64)
}

/// Cross entropy -sum(target * ln(pred)) between a constant probability
/// vector and a predicted one. Only the lower clamp is applied so that a
/// prediction of exactly 1 contributes exactly zero.
pub fn cross_entropy(target: &Tensor, pred: &Var) -> Var {
    let t = constant_on(pred, target.clone());
    t.hadamard(&pred.clamp(PROB_EPS, f64::INFINITY).ln()).sum_all().scale(-1.0)
}

fn constant_on(var: &Var, value: Tensor) -> Var {
    var.tape().constant(value)
}

/// Max relative error between analytic gradients of `f` and central finite
/// differences with the given step, over every coordinate of every parameter.
/// The error is |analytic - numeric| / max(1, |analytic|, |numeric|).
pub fn grad_check<F>(f: F, params: &[Tensor], step: f64) -> f64
where
    F: Fn(&Tape, &[Var]) -> Var,
{
    let tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.input(p.clone())).collect();
    let out = f(&tape, &vars);
    let grads = out.backward();
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.wrt(v)).collect();

    let eval = |ps: &[Tensor]| -> f64 {
        let t = Tape::new();
        let vs: Vec<Var> = ps.iter().map(|p| t.input(p.clone())).collect();
        f(&t, &vs).item()
    };

    let mut work: Vec<Tensor> = params.to_vec();
    let mut max_rel = 0.0f64;
    for pi in 0..params.len() {
        for k in 0..params[pi].len() {
            let orig = work[pi].data()[k];
            work[pi].data_mut()[k] = orig + step;
            let fp = eval(&work);
            work[pi].data_mut()[k] = orig - step;
            let fm = eval(&work);
            work[pi].data_mut()[k] = orig;
            let numeric = (fp - fm) / (2.0 * step);
            let a = analytic[pi].data()[k];
            let rel = (a - numeric).abs() / 1.0f64.max(a.abs()).max(numeric.abs());
            max_rel = max_rel.max(rel);
        }
    }
    max_rel
}
