//! Differentiable building blocks with hand-written gradients.
//!
//! Everything here works in `f64`. Each forward op that participates in
//! training has a matching `*_backward` that accumulates into [`Param::grad`]
//! and returns (or accumulates) gradients for its inputs. [`gradcheck`]
//! compares those analytic gradients with central finite differences.

use rand::Rng;

use crate::{Error, Result};

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim(
                "Matrix::from_vec",
                format!("{} entries for {rows}x{cols}", rows * cols),
                data.len(),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    /// Entries drawn uniformly from `[-bound, bound]`.
    pub fn uniform<R: Rng + ?Sized>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    /// `self · x`.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        self.data
            .chunks_exact(self.cols.max(1))
            .take(self.rows)
            .map(|row| dot(row, x))
            .collect()
    }

    /// `out += selfᵀ · y`.
    pub fn matvec_t_acc(&self, y: &[f64], out: &mut [f64]) {
        debug_assert_eq!(y.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        for (r, &yr) in y.iter().enumerate() {
            if yr == 0.0 {
                continue;
            }
            for (o, w) in out.iter_mut().zip(self.row(r)) {
                *o += yr * w;
            }
        }
    }

    /// `self += a ⊗ b`.
    pub fn add_outer(&mut self, a: &[f64], b: &[f64]) {
        debug_assert_eq!(a.len(), self.rows);
        debug_assert_eq!(b.len(), self.cols);
        for (r, &ar) in a.iter().enumerate() {
            if ar == 0.0 {
                continue;
            }
            for (dst, bc) in self.row_mut(r).iter_mut().zip(b) {
                *dst += ar * bc;
            }
        }
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// A learnable tensor and its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Matrix,
    pub grad: Matrix,
}

impl Param {
    pub fn new(value: Matrix) -> Self {
        let grad = Matrix::zeros(value.rows(), value.cols());
        Self { value, grad }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(Matrix::zeros(rows, cols))
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` where `fan_in` is the
    /// column count.
    pub fn fan_in_uniform<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (cols.max(1) as f64).sqrt();
        Self::new(Matrix::uniform(rows, cols, bound, rng))
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// A fixed, ordered collection of named parameter tensors.
pub trait ParamSet {
    fn param_count(&self) -> usize;
    fn param_name(&self, index: usize) -> String;
    fn param(&self, index: usize) -> &Param;
    fn param_mut(&mut self, index: usize) -> &mut Param;

    fn zero_grad(&mut self) {
        for i in 0..self.param_count() {
            self.param_mut(i).zero_grad();
        }
    }

    fn scalar_count(&self) -> usize {
        (0..self.param_count())
            .map(|i| self.param(i).value.len())
            .sum()
    }
}

/// `W·x + b`.
pub fn linear_forward(w: &Matrix, b: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    if w.cols() != x.len() || w.rows() != b.len() {
        return Err(Error::dim(
            "linear_forward",
            format!(
                "W {}x{}, b {}, x {}",
                w.rows(),
                w.cols(),
                w.rows(),
                w.cols()
            ),
            format!("W {}x{}, b {}, x {}", w.rows(), w.cols(), b.len(), x.len()),
        ));
    }
    let mut y = w.matvec(x);
    for (yi, bi) in y.iter_mut().zip(b) {
        *yi += bi;
    }
    Ok(y)
}

/// Accumulates `dW += dy ⊗ x`, `db += dy`, and `dx += Wᵀ dy`.
pub fn linear_backward(
    w: &mut Param,
    b: &mut Param,
    x: &[f64],
    dy: &[f64],
    dx: Option<&mut [f64]>,
) {
    w.grad.add_outer(dy, x);
    for (g, d) in b.grad.as_mut_slice().iter_mut().zip(dy) {
        *g += d;
    }
    if let Some(dx) = dx {
        w.value.matvec_t_acc(dy, dx);
    }
}

/// Numerically stable softmax.
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::Argument("softmax of an empty vector".into()));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Argument("softmax input is not finite".into()));
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|x| *x /= sum);
    Ok(out)
}

/// Gradient w.r.t. the softmax input given the output `p` and `dp`.
pub fn softmax_backward(p: &[f64], dp: &[f64]) -> Vec<f64> {
    let inner = dot(p, dp);
    p.iter().zip(dp).map(|(pi, di)| pi * (di - inner)).collect()
}

/// Standard LSTM cell. Gate blocks are stacked row-wise in the order
/// input, forget, output, candidate.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmCellParams {
    /// `4D × D_in`
    pub w_input: Param,
    /// `4D × D`
    pub w_hidden: Param,
    /// `4D × 1`
    pub bias: Param,
}

impl LstmCellParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            w_input: Param::zeros(4 * hidden, input),
            w_hidden: Param::zeros(4 * hidden, hidden),
            bias: Param::zeros(4 * hidden, 1),
        }
    }

    /// Fan-in uniform weights, zero biases, forget-gate bias offset +1.
    pub fn init<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let mut p = Self {
            w_input: Param::fan_in_uniform(4 * hidden, input, rng),
            w_hidden: Param::fan_in_uniform(4 * hidden, hidden, rng),
            bias: Param::zeros(4 * hidden, 1),
        };
        for b in &mut p.bias.value.as_mut_slice()[hidden..2 * hidden] {
            *b = 1.0;
        }
        p
    }

    pub fn input_width(&self) -> usize {
        self.w_input.value.cols()
    }

    pub fn hidden_width(&self) -> usize {
        self.w_hidden.value.cols()
    }
}

/// Everything [`lstm_cell_backward`] needs from one forward step.
#[derive(Clone, Debug)]
pub struct LstmCache {
    pub x: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub c_prev: Vec<f64>,
    pub input_gate: Vec<f64>,
    pub forget_gate: Vec<f64>,
    pub output_gate: Vec<f64>,
    pub candidate: Vec<f64>,
    pub c: Vec<f64>,
    pub tanh_c: Vec<f64>,
    pub h: Vec<f64>,
}

pub fn lstm_cell(
    params: &LstmCellParams,
    x: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let cache = lstm_cell_cached(params, x, h_prev, c_prev)?;
    Ok((cache.h, cache.c))
}

pub fn lstm_cell_cached(
    params: &LstmCellParams,
    x: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
) -> Result<LstmCache> {
    let d = params.hidden_width();
    if x.len() != params.input_width() || h_prev.len() != d || c_prev.len() != d {
        return Err(Error::dim(
            "lstm_cell",
            format!("x {}, h {d}, c {d}", params.input_width()),
            format!("x {}, h {}, c {}", x.len(), h_prev.len(), c_prev.len()),
        ));
    }
    let mut pre = params.w_input.value.matvec(x);
    for ((p, u), b) in pre
        .iter_mut()
        .zip(params.w_hidden.value.matvec(h_prev))
        .zip(params.bias.value.as_slice())
    {
        *p += u + b;
    }
    let input_gate: Vec<f64> = pre[..d].iter().map(|&a| sigmoid(a)).collect();
    let forget_gate: Vec<f64> = pre[d..2 * d].iter().map(|&a| sigmoid(a)).collect();
    let output_gate: Vec<f64> = pre[2 * d..3 * d].iter().map(|&a| sigmoid(a)).collect();
    let candidate: Vec<f64> = pre[3 * d..].iter().map(|a| a.tanh()).collect();
    let c: Vec<f64> = (0..d)
        .map(|j| forget_gate[j] * c_prev[j] + input_gate[j] * candidate[j])
        .collect();
    let tanh_c: Vec<f64> = c.iter().map(|v| v.tanh()).collect();
    let h = (0..d).map(|j| output_gate[j] * tanh_c[j]).collect();
    Ok(LstmCache {
        x: x.to_vec(),
        h_prev: h_prev.to_vec(),
        c_prev: c_prev.to_vec(),
        input_gate,
        forget_gate,
        output_gate,
        candidate,
        c,
        tanh_c,
        h,
    })
}

/// Backward through one LSTM step. `dh` and `dc` are the total upstream
/// gradients for this step's outputs. Returns `(dx, dh_prev, dc_prev)`.
pub fn lstm_cell_backward(
    params: &mut LstmCellParams,
    cache: &LstmCache,
    dh: &[f64],
    dc: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let d = cache.h.len();
    let mut dpre = vec![0.0; 4 * d];
    let mut dc_prev = vec![0.0; d];
    for j in 0..d {
        let (i, f, o, g) = (
            cache.input_gate[j],
            cache.forget_gate[j],
            cache.output_gate[j],
            cache.candidate[j],
        );
        let tc = cache.tanh_c[j];
        let d_o = dh[j] * tc;
        let dcj = dc[j] + dh[j] * o * (1.0 - tc * tc);
        dpre[j] = dcj * g * i * (1.0 - i);
        dpre[d + j] = dcj * cache.c_prev[j] * f * (1.0 - f);
        dpre[2 * d + j] = d_o * o * (1.0 - o);
        dpre[3 * d + j] = dcj * i * (1.0 - g * g);
        dc_prev[j] = dcj * f;
    }
    params.w_input.grad.add_outer(&dpre, &cache.x);
    params.w_hidden.grad.add_outer(&dpre, &cache.h_prev);
    for (g, v) in params.bias.grad.as_mut_slice().iter_mut().zip(&dpre) {
        *g += v;
    }
    let mut dx = vec![0.0; cache.x.len()];
    params.w_input.value.matvec_t_acc(&dpre, &mut dx);
    let mut dh_prev = vec![0.0; d];
    params.w_hidden.value.matvec_t_acc(&dpre, &mut dh_prev);
    (dx, dh_prev, dc_prev)
}

/// Per-tensor outcome of a finite-difference check.
#[derive(Clone, Debug)]
pub struct TensorCheck {
    pub name: String,
    pub coordinates: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Coordinates whose relative error exceeded the tolerance.
    pub failures: Vec<usize>,
}

impl TensorCheck {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub step: f64,
    pub tolerance: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.tensors.iter().all(TensorCheck::passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.tensors
            .iter()
            .map(|t| t.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn failing(&self) -> impl Iterator<Item = &TensorCheck> {
        self.tensors.iter().filter(|t| !t.passed())
    }
}

/// Gradients smaller than this are compared on an absolute scale; finite
/// differences cannot resolve relative error below it.
pub const GRADCHECK_DENOM_FLOOR: f64 = 1e-6;

/// Relative error `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(GRADCHECK_DENOM_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Compares the analytic gradients already stored in `params` with central
/// differences `(f(p+h) - f(p-h)) / 2h` of `loss`, one coordinate at a time.
///
/// Parameter values are restored exactly after each probe.
pub fn gradcheck<P, F>(params: &mut P, mut loss: F, step: f64, tol: f64) -> Result<GradReport>
where
    P: ParamSet + ?Sized,
    F: FnMut(&P) -> f64,
{
    if !(step > 0.0) {
        return Err(Error::Argument(format!(
            "gradcheck step must be > 0, got {step}"
        )));
    }
    let first = loss(params);
    let second = loss(params);
    if first.to_bits() != second.to_bits() {
        return Err(Error::Determinism { first, second });
    }
    let mut tensors = Vec::with_capacity(params.param_count());
    for ti in 0..params.param_count() {
        let n = params.param(ti).value.len();
        let mut check = TensorCheck {
            name: params.param_name(ti),
            coordinates: n,
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            failures: Vec::new(),
        };
        for j in 0..n {
            let orig = params.param(ti).value.as_slice()[j];
            params.param_mut(ti).value.as_mut_slice()[j] = orig + step;
            let plus = loss(params);
            params.param_mut(ti).value.as_mut_slice()[j] = orig - step;
            let minus = loss(params);
            params.param_mut(ti).value.as_mut_slice()[j] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let analytic = params.param(ti).grad.as_slice()[j];
            let rel = relative_error(analytic, numeric);
            check.max_rel_error = check.max_rel_error.max(rel);
            check.max_abs_error = check.max_abs_error.max((analytic - numeric).abs());
            if !(rel < tol) {
                check.failures.push(j);
            }
        }
        tensors.push(check);
    }
    Ok(GradReport {
        step,
        tolerance: tol,
        tensors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn linear_identity_and_zero_map() {
        let y = linear_forward(&Matrix::identity(2), &[0.0, 0.0], &[3.0, 4.0]).unwrap();
        assert_eq!(y, vec![3.0, 4.0]);
        let y = linear_forward(&Matrix::zeros(2, 2), &[1.0, 1.0], &[-7.0, 9.5]).unwrap();
        assert_eq!(y, vec![1.0, 1.0]);
    }

    #[test]
    fn linear_matches_hand_summation() {
        let mut r = rng(7);
        let w = Matrix::uniform(3, 2, 1.0, &mut r);
        let b = [0.3, -0.2, 0.9];
        let x = [1.7, -0.4];
        let y = linear_forward(&w, &b, &x).unwrap();
        for i in 0..3 {
            let mut acc = b[i];
            for j in 0..2 {
                acc += w.as_slice()[i * 2 + j] * x[j];
            }
            assert!((y[i] - acc).abs() < 1e-15);
        }
    }

    #[test]
    fn linear_shape_error_names_both_shapes() {
        let err = linear_forward(&Matrix::zeros(2, 3), &[0.0, 0.0], &[1.0]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3"), "{msg}");
        assert!(msg.contains("x 1"), "{msg}");
    }

    #[test]
    fn lstm_zero_params_give_zero_state() {
        let p = LstmCellParams::zeros(2, 3);
        let (h, c) = lstm_cell(&p, &[0.5, -1.0], &[0.0; 3], &[0.0; 3]).unwrap();
        assert_eq!(h, vec![0.0; 3]);
        assert_eq!(c, vec![0.0; 3]);
        let cache = lstm_cell_cached(&p, &[0.5, -1.0], &[0.0; 3], &[0.0; 3]).unwrap();
        assert!(cache.input_gate.iter().all(|&g| g == 0.5));
        assert!(cache.candidate.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn lstm_shapes_and_width_errors() {
        let p = LstmCellParams::init(2, 3, &mut rng(1));
        let (h, c) = lstm_cell(&p, &[1.0, 2.0], &[0.0; 3], &[0.0; 3]).unwrap();
        assert_eq!((h.len(), c.len()), (3, 3));
        assert!(matches!(
            lstm_cell(&p, &[1.0], &[0.0; 3], &[0.0; 3]),
            Err(Error::Dimension { .. })
        ));
        assert!(matches!(
            lstm_cell(&p, &[1.0, 2.0], &[0.0; 2], &[0.0; 3]),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn lstm_matches_scalar_gate_oracle() {
        let mut r = rng(99);
        let (din, d) = (3, 4);
        let mut p = LstmCellParams::init(din, d, &mut r);
        p.bias.value = Matrix::uniform(4 * d, 1, 0.5, &mut r);
        let x: Vec<f64> = (0..din).map(|_| r.random_range(-1.0..1.0)).collect();
        let hp: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
        let cp: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
        let (h, c) = lstm_cell(&p, &x, &hp, &cp).unwrap();
        let logistic = |a: f64| 1.0 / (1.0 + (-a).exp());
        for j in 0..d {
            let pre = |block: usize| {
                let row = block * d + j;
                let mut s = p.bias.value.get(row, 0);
                for k in 0..din {
                    s += p.w_input.value.get(row, k) * x[k];
                }
                for k in 0..d {
                    s += p.w_hidden.value.get(row, k) * hp[k];
                }
                s
            };
            let i = logistic(pre(0));
            let f = logistic(pre(1));
            let o = logistic(pre(2));
            let g = pre(3).tanh();
            let cj = f * cp[j] + i * g;
            let hj = o * cj.tanh();
            assert!((c[j] - cj).abs() < 1e-12);
            assert!((h[j] - hj).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_cases() {
        let p = softmax(&[0.0, 0.0, 0.0]).unwrap();
        for v in &p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let a = softmax(&[1.0, 2.0, 3.0]).unwrap();
        let z = 1f64.exp() + 2f64.exp() + 3f64.exp();
        for (k, v) in a.iter().enumerate() {
            assert!((v - ((k + 1) as f64).exp() / z).abs() < 1e-15);
        }
        let b = softmax(&[101.0, 102.0, 103.0]).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }
        assert!(matches!(softmax(&[]), Err(Error::Argument(_))));
    }

    #[test]
    fn identity_linear_sum_gives_ones_gradient() {
        let mut w = Param::new(Matrix::identity(3));
        let mut b = Param::zeros(3, 1);
        let mut dx = vec![0.0; 3];
        linear_backward(&mut w, &mut b, &[0.2, 0.4, 0.6], &[1.0; 3], Some(&mut dx));
        assert_eq!(dx, vec![1.0; 3]);
    }

    #[test]
    fn softmax_cross_entropy_gradient_vanishes_at_optimum() {
        // d(-log p_y)/dp = -1/p_y on y; at p = e_y that is (0,..,-1,..0).
        let p = [0.0, 1.0, 0.0];
        let dp = [0.0, -1.0, 0.0];
        let g = softmax_backward(&p, &dp);
        assert!(g.iter().all(|v| v.abs() < 1e-15));
    }

    struct Flat(Vec<Param>);

    impl ParamSet for Flat {
        fn param_count(&self) -> usize {
            self.0.len()
        }
        fn param_name(&self, i: usize) -> String {
            format!("p{i}")
        }
        fn param(&self, i: usize) -> &Param {
            &self.0[i]
        }
        fn param_mut(&mut self, i: usize) -> &mut Param {
            &mut self.0[i]
        }
    }

    #[test]
    fn gradcheck_quadratic_and_linear() {
        let mut set = Flat(vec![Param::new(
            Matrix::from_vec(1, 3, vec![0.5, -1.5, 2.0]).unwrap(),
        )]);
        set.0[0].grad = Matrix::from_vec(1, 3, vec![1.0, -3.0, 4.0]).unwrap();
        let rep = gradcheck(
            &mut set,
            |p| p.0[0].value.as_slice().iter().map(|x| x * x).sum(),
            1e-5,
            1e-8,
        )
        .unwrap();
        assert!(rep.passed(), "{rep:?}");

        set.0[0].grad = Matrix::from_vec(1, 3, vec![2.0, 3.0, -1.0]).unwrap();
        let coef = [2.0, 3.0, -1.0];
        let rep = gradcheck(
            &mut set,
            |p| dot(p.0[0].value.as_slice(), &coef),
            1e-3,
            1e-10,
        )
        .unwrap();
        assert!(rep.passed(), "{rep:?}");
    }

    #[test]
    fn gradcheck_rejects_nondeterministic_loss() {
        let mut set = Flat(vec![Param::zeros(1, 1)]);
        let mut calls = 0.0;
        let res = gradcheck(
            &mut set,
            |_| {
                calls += 1.0;
                calls
            },
            1e-5,
            1e-4,
        );
        assert!(matches!(res, Err(Error::Determinism { .. })));
        assert!(matches!(
            gradcheck(&mut Flat(vec![]), |_| 0.0, 0.0, 1e-4),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn gradcheck_flags_wrong_gradient() {
        let mut set = Flat(vec![Param::new(
            Matrix::from_vec(1, 2, vec![1.0, 2.0]).unwrap(),
        )]);
        set.0[0].grad = Matrix::from_vec(1, 2, vec![2.0, 0.0]).unwrap();
        let rep = gradcheck(
            &mut set,
            |p| p.0[0].value.as_slice().iter().map(|x| x * x).sum(),
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(!rep.passed());
        assert_eq!(rep.tensors[0].failures, vec![1]);
    }

    struct LstmSet {
        cell: LstmCellParams,
    }

    impl ParamSet for LstmSet {
        fn param_count(&self) -> usize {
            3
        }
        fn param_name(&self, i: usize) -> String {
            ["w_input", "w_hidden", "bias"][i].to_string()
        }
        fn param(&self, i: usize) -> &Param {
            [&self.cell.w_input, &self.cell.w_hidden, &self.cell.bias][i]
        }
        fn param_mut(&mut self, i: usize) -> &mut Param {
            match i {
                0 => &mut self.cell.w_input,
                1 => &mut self.cell.w_hidden,
                _ => &mut self.cell.bias,
            }
        }
    }

    // Loss = a·h + b·c over one step; checks parameter and input gradients.
    #[test]
    fn lstm_backward_matches_finite_differences_over_seeds() {
        for seed in 0..100u64 {
            let mut r = rng(seed);
            let din = r.random_range(1..4);
            let d = r.random_range(1..4);
            let mut set = LstmSet {
                cell: LstmCellParams::init(din, d, &mut r),
            };
            set.cell.bias.value = Matrix::uniform(4 * d, 1, 0.5, &mut r);
            let x: Vec<f64> = (0..din).map(|_| r.random_range(-1.0..1.0)).collect();
            let hp: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
            let cp: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
            let a: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
            let loss_of = |cell: &LstmCellParams, x: &[f64], hp: &[f64], cp: &[f64]| {
                let (h, c) = lstm_cell(cell, x, hp, cp).unwrap();
                dot(&h, &a) + dot(&c, &b)
            };
            let cache = lstm_cell_cached(&set.cell, &x, &hp, &cp).unwrap();
            let (dx, dhp, dcp) = lstm_cell_backward(&mut set.cell, &cache, &a, &b);
            let rep = gradcheck(&mut set, |s| loss_of(&s.cell, &x, &hp, &cp), 1e-5, 1e-4).unwrap();
            assert!(rep.passed(), "seed {seed}: {rep:?}");

            let h = 1e-5;
            for (inputs, grads) in [(0usize, &dx), (1, &dhp), (2, &dcp)] {
                for j in 0..grads.len() {
                    let mut vs = [x.clone(), hp.clone(), cp.clone()];
                    vs[inputs][j] += h;
                    let fp = loss_of(&set.cell, &vs[0], &vs[1], &vs[2]);
                    vs[inputs][j] -= 2.0 * h;
                    let fm = loss_of(&set.cell, &vs[0], &vs[1], &vs[2]);
                    let num = (fp - fm) / (2.0 * h);
                    assert!(
                        relative_error(grads[j], num) < 1e-4,
                        "seed {seed} input {inputs}"
                    );
                }
            }
        }
    }

    #[test]
    fn softmax_backward_matches_finite_differences() {
        for seed in 0..100u64 {
            let mut r = rng(seed + 1000);
            let n = r.random_range(1..6);
            let v: Vec<f64> = (0..n).map(|_| r.random_range(-3.0..3.0)).collect();
            let c: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
            let p = softmax(&v).unwrap();
            let g = softmax_backward(&p, &c);
            for j in 0..n {
                let mut vp = v.clone();
                vp[j] += 1e-5;
                let mut vm = v.clone();
                vm[j] -= 1e-5;
                let num =
                    (dot(&softmax(&vp).unwrap(), &c) - dot(&softmax(&vm).unwrap(), &c)) / 2e-5;
                assert!(relative_error(g[j], num) < 1e-4);
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #[test]
            fn softmax_sums_to_one_and_is_permutation_equivariant(
                v in proptest::collection::vec(-50.0f64..50.0, 1..12),
                shift in -100.0f64..100.0,
                rot in 0usize..12,
            ) {
                let p = softmax(&v).unwrap();
                prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                prop_assert!(p.iter().all(|&x| x > 0.0));
                let k = rot % v.len();
                let mut rv = v.clone();
                rv.rotate_left(k);
                let mut rp = p.clone();
                rp.rotate_left(k);
                let q = softmax(&rv).unwrap();
                for (a, b) in q.iter().zip(&rp) {
                    prop_assert!((a - b).abs() < 1e-15);
                }
                let shifted: Vec<f64> = v.iter().map(|x| x + shift).collect();
                for (a, b) in softmax(&shifted).unwrap().iter().zip(&p) {
                    prop_assert!((a - b).abs() < 1e-12);
                }
            }

            #[test]
            fn lstm_hidden_state_is_strictly_bounded(seed in 0u64..10_000, scale in 0.1f64..2.0) {
                let mut r = rng(seed);
                let mut p = LstmCellParams::init(3, 4, &mut r);
                p.w_input.value = Matrix::uniform(16, 3, scale, &mut r);
                let x: Vec<f64> = (0..3).map(|_| r.random_range(-2.0..2.0)).collect();
                let hp: Vec<f64> = (0..4).map(|_| r.random_range(-1.0..1.0)).collect();
                let cp: Vec<f64> = (0..4).map(|_| r.random_range(-3.0..3.0)).collect();
                let (h, _) = lstm_cell(&p, &x, &hp, &cp).unwrap();
                prop_assert!(h.iter().all(|v| v.abs() < 1.0));
            }
        }
    }
}
