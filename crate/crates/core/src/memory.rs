//! External slot memory.
//!
//! A [`MemoryBank`] holds `L` slots of width `d`, filled as a ring buffer in
//! visit order. Reads score each occupied slot against a key projected from
//! the reader's hidden state and return the softmax-weighted sum of slots.
//! Writes blend the slot under the cursor with a projection of the writer's
//! input through two logistic gates:
//!
//! ```text
//! (r, v)  = sigmoid(G · [writer ⊕ slot] + b)
//! slot'   = r ⊙ slot + v ⊙ (A · writer)
//! ```
//!
//! The same machinery serves the global bank (writer = encoder state) and
//! the patient bank (writer = embedded past label).

use rand::Rng;

use crate::nn::{dot, norm, sigmoid, softmax, softmax_backward, Matrix, Param, ParamSet};
use crate::{Error, Result};

/// Below this norm a vector is treated as zero and its cosine similarity is 0.
pub const COSINE_NORM_FLOOR: f64 = 1e-12;

/// How slot strengths combine with cosine similarity before the softmax.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ScoreKind {
    /// `α_l + cos(key, m_l)`
    #[default]
    Additive,
    /// `exp(α_l) · cos(key, m_l)`
    Multiplicative,
}

impl ScoreKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ScoreKind::Additive => "add",
            ScoreKind::Multiplicative => "mul",
        }
    }
}

impl std::str::FromStr for ScoreKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "add" => Ok(ScoreKind::Additive),
            "mul" => Ok(ScoreKind::Multiplicative),
            other => Err(Error::Config(format!(
                "unknown score kind `{other}` (add|mul)"
            ))),
        }
    }
}

/// Learnable parameters of one memory network.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryParams {
    /// Key projection `W_k`, `d × key_in`.
    pub key: Param,
    /// Write projection `A`, `d × write_in`.
    pub write: Param,
    /// Gate map, `2d × (write_in + d)`; rows `[0, d)` give `r`, `[d, 2d)` give `v`.
    pub gate_w: Param,
    pub gate_b: Param,
    /// Per-slot strengths `α`, `L × 1`.
    pub strengths: Param,
}

impl MemoryParams {
    pub fn init<R: Rng + ?Sized>(
        slots: usize,
        width: usize,
        key_in: usize,
        write_in: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            key: Param::fan_in_uniform(width, key_in, rng),
            write: Param::fan_in_uniform(width, write_in, rng),
            gate_w: Param::fan_in_uniform(2 * width, write_in + width, rng),
            gate_b: Param::zeros(2 * width, 1),
            strengths: Param::zeros(slots, 1),
        }
    }

    pub fn slots(&self) -> usize {
        self.strengths.value.rows()
    }

    pub fn width(&self) -> usize {
        self.key.value.rows()
    }

    pub fn key_input(&self) -> usize {
        self.key.value.cols()
    }

    pub fn write_input(&self) -> usize {
        self.write.value.cols()
    }

    pub(crate) fn tensors(&self) -> [(&'static str, &Param); 5] {
        [
            ("key", &self.key),
            ("write", &self.write),
            ("gate_w", &self.gate_w),
            ("gate_b", &self.gate_b),
            ("strengths", &self.strengths),
        ]
    }

    pub(crate) fn tensor_mut(&mut self, i: usize) -> &mut Param {
        match i {
            0 => &mut self.key,
            1 => &mut self.write,
            2 => &mut self.gate_w,
            3 => &mut self.gate_b,
            _ => &mut self.strengths,
        }
    }
}

impl ParamSet for MemoryParams {
    fn param_count(&self) -> usize {
        5
    }

    fn param_name(&self, index: usize) -> String {
        self.tensors()[index].0.to_string()
    }

    fn param(&self, index: usize) -> &Param {
        self.tensors()[index].1
    }

    fn param_mut(&mut self, index: usize) -> &mut Param {
        self.tensor_mut(index)
    }
}

/// Slot storage of one memory network.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank {
    slots: Matrix,
    occupied: usize,
    cursor: usize,
}

impl MemoryBank {
    pub fn new(slots: usize, width: usize) -> Self {
        assert!(slots > 0, "a memory bank needs at least one slot");
        Self {
            slots: Matrix::zeros(slots, width),
            occupied: 0,
            cursor: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.slots.rows()
    }

    pub fn width(&self) -> usize {
        self.slots.cols()
    }

    pub fn occupied(&self) -> usize {
        self.occupied
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn slots(&self) -> &Matrix {
        &self.slots
    }

    pub fn slot(&self, l: usize) -> &[f64] {
        self.slots.row(l)
    }

    /// Writes `r ⊙ slot + v ⊙ m` into the slot under the cursor and advances it.
    pub fn write_gated(&mut self, m: &[f64], r: &[f64], v: &[f64]) {
        let p = self.cursor;
        for ((s, &mi), (&ri, &vi)) in self.slots.row_mut(p).iter_mut().zip(m).zip(r.iter().zip(v)) {
            *s = ri * *s + vi * mi;
        }
        self.cursor = (self.cursor + 1) % self.capacity();
        self.occupied = (self.occupied + 1).min(self.capacity());
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReadResult {
    pub e: Vec<f64>,
    /// One weight per slot; zero on unoccupied slots.
    pub weights: Vec<f64>,
}

/// Forward record of one read.
#[derive(Clone, Debug)]
pub struct ReadCache {
    key_input: Vec<f64>,
    key: Vec<f64>,
    /// Copy of the occupied slots at read time.
    slots: Matrix,
    cosines: Vec<f64>,
    weights: Vec<f64>,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    if na < COSINE_NORM_FLOOR || nb < COSINE_NORM_FLOOR {
        0.0
    } else {
        dot(a, b) / (na * nb)
    }
}

/// Accumulates the gradient of `cos(a, b)` scaled by `g` into `da` and `db`.
fn cosine_backward(a: &[f64], b: &[f64], g: f64, da: &mut [f64], db: &mut [f64]) {
    let (na, nb) = (norm(a), norm(b));
    if na < COSINE_NORM_FLOOR || nb < COSINE_NORM_FLOOR || g == 0.0 {
        return;
    }
    let c = dot(a, b) / (na * nb);
    let inv = 1.0 / (na * nb);
    for j in 0..a.len() {
        da[j] += g * (b[j] * inv - c * a[j] / (na * na));
        db[j] += g * (a[j] * inv - c * b[j] / (nb * nb));
    }
}

pub fn memory_read(
    bank: &MemoryBank,
    h: &[f64],
    params: &MemoryParams,
    score: ScoreKind,
) -> Result<ReadResult> {
    memory_read_cached(bank, h, params, score).map(|(r, _)| r)
}

pub fn memory_read_cached(
    bank: &MemoryBank,
    h: &[f64],
    params: &MemoryParams,
    score: ScoreKind,
) -> Result<(ReadResult, ReadCache)> {
    if h.len() != params.key_input() {
        return Err(Error::dim("memory_read", params.key_input(), h.len()));
    }
    if bank.width() != params.width() || bank.capacity() != params.slots() {
        return Err(Error::dim(
            "memory_read",
            format!("bank {}x{}", params.slots(), params.width()),
            format!("bank {}x{}", bank.capacity(), bank.width()),
        ));
    }
    let d = bank.width();
    let occ = bank.occupied();
    let key = params.key.value.matvec(h);
    let mut weights = vec![0.0; bank.capacity()];
    let mut e = vec![0.0; d];
    let snapshot = Matrix::from_vec(occ, d, bank.slots.as_slice()[..occ * d].to_vec())?;
    let mut cosines = Vec::with_capacity(occ);
    if occ > 0 {
        let alpha = params.strengths.value.as_slice();
        let scores: Vec<f64> = (0..occ)
            .map(|l| {
                let c = cosine(&key, snapshot.row(l));
                cosines.push(c);
                match score {
                    ScoreKind::Additive => alpha[l] + c,
                    ScoreKind::Multiplicative => alpha[l].exp() * c,
                }
            })
            .collect();
        let w = softmax(&scores)?;
        for (l, &wl) in w.iter().enumerate() {
            for (ej, mj) in e.iter_mut().zip(snapshot.row(l)) {
                *ej += wl * mj;
            }
        }
        weights[..occ].copy_from_slice(&w);
    }
    let cache = ReadCache {
        key_input: h.to_vec(),
        key,
        slots: snapshot,
        cosines,
        weights: weights[..occ].to_vec(),
    };
    Ok((ReadResult { e, weights }, cache))
}

/// Backward through a read. Accumulates parameter gradients, adds the
/// gradient w.r.t. the reader input into `d_input`, and the gradient w.r.t.
/// the bank state at read time into `d_slots` (`L × d`).
pub fn memory_read_backward(
    params: &mut MemoryParams,
    cache: &ReadCache,
    score: ScoreKind,
    de: &[f64],
    d_input: &mut [f64],
    d_slots: &mut Matrix,
) {
    let occ = cache.weights.len();
    if occ == 0 {
        return;
    }
    let dw: Vec<f64> = (0..occ).map(|l| dot(de, cache.slots.row(l))).collect();
    for (l, &wl) in cache.weights.iter().enumerate() {
        for (g, &dej) in d_slots.row_mut(l).iter_mut().zip(de) {
            *g += wl * dej;
        }
    }
    let ds = softmax_backward(&cache.weights, &dw);
    let mut dkey = vec![0.0; cache.key.len()];
    for l in 0..occ {
        let alpha = params.strengths.value.as_slice()[l];
        let dcos = match score {
            ScoreKind::Additive => {
                params.strengths.grad.as_mut_slice()[l] += ds[l];
                ds[l]
            }
            ScoreKind::Multiplicative => {
                let ea = alpha.exp();
                params.strengths.grad.as_mut_slice()[l] += ds[l] * ea * cache.cosines[l];
                ds[l] * ea
            }
        };
        cosine_backward(
            &cache.key,
            cache.slots.row(l),
            dcos,
            &mut dkey,
            d_slots.row_mut(l),
        );
    }
    params.key.grad.add_outer(&dkey, &cache.key_input);
    params.key.value.matvec_t_acc(&dkey, d_input);
}

/// Forward record of one write.
#[derive(Clone, Debug)]
pub struct WriteCache {
    slot: usize,
    writer: Vec<f64>,
    old: Vec<f64>,
    projected: Vec<f64>,
    gates: Vec<f64>,
}

impl WriteCache {
    pub fn slot(&self) -> usize {
        self.slot
    }

    /// `(r, v)` as computed for this write.
    pub fn gates(&self) -> (&[f64], &[f64]) {
        self.gates.split_at(self.old.len())
    }
}

pub fn memory_write(
    bank: &mut MemoryBank,
    writer: &[f64],
    params: &MemoryParams,
) -> Result<WriteCache> {
    if writer.len() != params.write_input() {
        return Err(Error::dim(
            "memory_write",
            params.write_input(),
            writer.len(),
        ));
    }
    if bank.width() != params.width() {
        return Err(Error::dim("memory_write", params.width(), bank.width()));
    }
    let d = bank.width();
    let slot = bank.cursor();
    let old = bank.slot(slot).to_vec();
    let mut gate_in = writer.to_vec();
    gate_in.extend_from_slice(&old);
    let gates: Vec<f64> = params
        .gate_w
        .value
        .matvec(&gate_in)
        .iter()
        .zip(params.gate_b.value.as_slice())
        .map(|(a, b)| sigmoid(a + b))
        .collect();
    let projected = params.write.value.matvec(writer);
    bank.write_gated(&projected, &gates[..d], &gates[d..]);
    Ok(WriteCache {
        slot,
        writer: writer.to_vec(),
        old,
        projected,
        gates,
    })
}

/// Backward through a write. On entry `d_slots` holds the gradient w.r.t.
/// the bank after the write; on exit, w.r.t. the bank before it.
pub fn memory_write_backward(
    params: &mut MemoryParams,
    cache: &WriteCache,
    d_slots: &mut Matrix,
    d_writer: &mut [f64],
) {
    let d = cache.old.len();
    let w_in = cache.writer.len();
    let dnew = d_slots.row(cache.slot).to_vec();
    let (r, v) = cache.gates.split_at(d);
    let mut dpre = vec![0.0; 2 * d];
    let mut dm = vec![0.0; d];
    let mut dold = vec![0.0; d];
    for j in 0..d {
        let dr = dnew[j] * cache.old[j];
        let dv = dnew[j] * cache.projected[j];
        dm[j] = dnew[j] * v[j];
        dold[j] = dnew[j] * r[j];
        dpre[j] = dr * r[j] * (1.0 - r[j]);
        dpre[d + j] = dv * v[j] * (1.0 - v[j]);
    }
    params.write.grad.add_outer(&dm, &cache.writer);
    params.write.value.matvec_t_acc(&dm, d_writer);
    let mut gate_in = cache.writer.clone();
    gate_in.extend_from_slice(&cache.old);
    params.gate_w.grad.add_outer(&dpre, &gate_in);
    for (g, x) in params.gate_b.grad.as_mut_slice().iter_mut().zip(&dpre) {
        *g += x;
    }
    let mut d_in = vec![0.0; w_in + d];
    params.gate_w.value.matvec_t_acc(&dpre, &mut d_in);
    for (a, b) in d_writer.iter_mut().zip(&d_in[..w_in]) {
        *a += b;
    }
    for (a, b) in dold.iter_mut().zip(&d_in[w_in..]) {
        *a += b;
    }
    d_slots.row_mut(cache.slot).copy_from_slice(&dold);
}

/// Embedding `d_p → d` used by the calibration gate.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationParams {
    pub w: Param,
    pub b: Param,
}

impl CalibrationParams {
    pub fn init<R: Rng + ?Sized>(global_width: usize, patient_width: usize, rng: &mut R) -> Self {
        Self {
            w: Param::fan_in_uniform(global_width, patient_width, rng),
            b: Param::zeros(global_width, 1),
        }
    }
}

/// `e_global ⊙ sigmoid(W · e_patient + b)`.
pub fn calibrate(
    e_global: &[f64],
    e_patient: &[f64],
    embed: &CalibrationParams,
) -> Result<Vec<f64>> {
    calibrate_gate(e_global, e_patient, embed)
        .map(|gate| e_global.iter().zip(&gate).map(|(e, s)| e * s).collect())
}

/// The sigmoid gate of [`calibrate`].
pub fn calibrate_gate(
    e_global: &[f64],
    e_patient: &[f64],
    embed: &CalibrationParams,
) -> Result<Vec<f64>> {
    let (rows, cols) = embed.w.value.shape();
    if cols != e_patient.len() || rows != e_global.len() {
        return Err(Error::dim(
            "calibrate",
            format!("global {rows}, patient {cols}"),
            format!("global {}, patient {}", e_global.len(), e_patient.len()),
        ));
    }
    let a = crate::nn::linear_forward(&embed.w.value, embed.b.value.as_slice(), e_patient)?;
    Ok(a.into_iter().map(sigmoid).collect())
}

/// Returns `(d_global, d_patient)`.
pub fn calibrate_backward(
    embed: &mut CalibrationParams,
    e_global: &[f64],
    e_patient: &[f64],
    gate: &[f64],
    de: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let d_global: Vec<f64> = de.iter().zip(gate).map(|(d, s)| d * s).collect();
    let da: Vec<f64> = (0..de.len())
        .map(|j| de[j] * e_global[j] * gate[j] * (1.0 - gate[j]))
        .collect();
    let mut d_patient = vec![0.0; e_patient.len()];
    crate::nn::linear_backward(
        &mut embed.w,
        &mut embed.b,
        e_patient,
        &da,
        Some(&mut d_patient),
    );
    (d_global, d_patient)
}
