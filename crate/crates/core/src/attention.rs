//! Multi-dimensional source2token attention and the directional
//! self-attention blocks that make up Bi-SAN.
//!
//! Both primitives are multi-dimensional: every feature dimension gets its
//! own softmax over tokens, so attention weights have the same `[T×d]` (or
//! `[T×T×d]`) layout as the values they mix.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{attend, concat, pairwise_add, Mask, Result, Tape, Tensor, TensorError, Var};

/// Saturation scale `c` of the token2token compatibility function.
pub const DEFAULT_SCALE: f64 = 5.0;

/// Nonlinearity applied inside the source2token scoring MLP.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Elu,
    Tanh,
}

impl Activation {
    fn apply<'t>(self, x: Var<'t>) -> Result<Var<'t>> {
        match self {
            Activation::Elu => x.elu(),
            Activation::Tanh => x.tanh(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Backward,
}

impl Direction {
    /// Whether position `i` may attend to position `j`; self is always attendable.
    pub fn allows(self, i: usize, j: usize) -> bool {
        match self {
            Direction::Forward => j <= i,
            Direction::Backward => j >= i,
        }
    }
}

/// Validity flag per position of one sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LevelMask(Vec<bool>);

impl LevelMask {
    pub fn new(valid: Vec<bool>) -> Self {
        Self(valid)
    }

    pub fn all_valid(len: usize) -> Self {
        Self(vec![true; len])
    }

    /// First `valid` of `len` positions are valid.
    pub fn prefix(valid: usize, len: usize) -> Self {
        Self((0..len).map(|i| i < valid).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_valid(&self, i: usize) -> bool {
        self.0[i]
    }

    pub fn valid_count(&self) -> usize {
        self.0.iter().filter(|&&v| v).count()
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.0
    }

    /// `[T×1]` mask for softmax over the token axis.
    fn column(&self) -> Result<Mask> {
        Mask::new(vec![self.0.len(), 1], self.0.clone())
    }

    /// `[T×1]` 0/1 tensor used to zero padded rows.
    fn row_scale(&self) -> Result<Tensor> {
        let data = self.0.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
        Tensor::matrix(self.0.len(), 1, data)
    }
}

fn check_input(op: &str, x: &Var<'_>, mask: &LevelMask) -> Result<(usize, usize)> {
    let shape = x.shape();
    if shape.len() != 2 {
        return Err(TensorError::Contract(format!("{op}: expected [T×d] input, got {shape:?}")));
    }
    if mask.len() != shape[0] {
        return Err(TensorError::Contract(format!(
            "{op}: mask covers {} positions but input has {}",
            mask.len(),
            shape[0]
        )));
    }
    Ok((shape[0], shape[1]))
}

/// Uniform in ±sqrt(6 / (fan_in + fan_out)).
pub fn glorot(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-limit..=limit)).collect();
    Tensor::matrix(rows, cols, data).expect("finite init")
}

fn zeros(d: usize) -> Tensor {
    Tensor::zeros(&[d])
}

/// Trainable arrays of one source2token module:
/// `f(x) = Wᵀ σ(W1 x + b1) + b`, with `W1, W ∈ [d_h × d_in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Source2TokenParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w: Tensor,
    pub b: Tensor,
}

impl Source2TokenParams {
    pub fn init(rng: &mut impl Rng, d_in: usize, d_h: usize) -> Self {
        Self {
            w1: glorot(rng, d_h, d_in),
            b1: zeros(d_h),
            w: glorot(rng, d_h, d_in),
            b: zeros(d_in),
        }
    }

    pub fn named(self) -> Vec<(&'static str, Tensor)> {
        vec![("w1", self.w1), ("b1", self.b1), ("w", self.w), ("b", self.b)]
    }

    pub fn bind<'t>(&self, tape: &'t Tape, activation: Activation) -> Source2Token<'t> {
        Source2Token {
            w1: tape.leaf(self.w1.clone()),
            b1: tape.leaf(self.b1.clone()),
            w: tape.leaf(self.w.clone()),
            b: tape.leaf(self.b.clone()),
            activation,
        }
    }
}

/// Source2token module bound to a tape.
#[derive(Debug, Clone, Copy)]
pub struct Source2Token<'t> {
    pub w1: Var<'t>,
    pub b1: Var<'t>,
    pub w: Var<'t>,
    pub b: Var<'t>,
    pub activation: Activation,
}

impl<'t> Source2Token<'t> {
    /// Returns the `[d_in]` summary and the `[T×d_in]` attention weights.
    pub fn apply(&self, x: Var<'t>, mask: &LevelMask) -> Result<(Var<'t>, Var<'t>)> {
        check_input("source2token", &x, mask)?;
        let hidden = self.activation.apply(x.matmul_nt(self.w1)?.add_bias(self.b1)?)?;
        let scores = hidden.matmul(self.w)?.add_bias(self.b)?;
        let weights = scores.masked_softmax(0, &mask.column()?)?;
        let summary = weights.mul(x)?.sum_rows()?;
        Ok((summary, weights))
    }
}

/// Trainable arrays of one directional self-attention block.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionalSanParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub b_attn: Tensor,
    pub wf: Tensor,
    pub wx: Tensor,
    pub bf: Tensor,
    pub scale: f64,
}

impl DirectionalSanParams {
    pub fn init(rng: &mut impl Rng, d: usize) -> Self {
        Self {
            wq: glorot(rng, d, d),
            wk: glorot(rng, d, d),
            b_attn: zeros(d),
            wf: glorot(rng, d, d),
            wx: glorot(rng, d, d),
            bf: zeros(d),
            scale: DEFAULT_SCALE,
        }
    }

    pub fn named(self) -> Vec<(&'static str, Tensor)> {
        vec![
            ("wq", self.wq),
            ("wk", self.wk),
            ("b_attn", self.b_attn),
            ("wf", self.wf),
            ("wx", self.wx),
            ("bf", self.bf),
        ]
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> DirectionalSan<'t> {
        DirectionalSan {
            wq: tape.leaf(self.wq.clone()),
            wk: tape.leaf(self.wk.clone()),
            b_attn: tape.leaf(self.b_attn.clone()),
            wf: tape.leaf(self.wf.clone()),
            wx: tape.leaf(self.wx.clone()),
            bf: tape.leaf(self.bf.clone()),
            scale: self.scale,
        }
    }
}

/// Directional self-attention block bound to a tape.
#[derive(Debug, Clone, Copy)]
pub struct DirectionalSan<'t> {
    pub wq: Var<'t>,
    pub wk: Var<'t>,
    pub b_attn: Var<'t>,
    pub wf: Var<'t>,
    pub wx: Var<'t>,
    pub bf: Var<'t>,
    pub scale: f64,
}

impl<'t> DirectionalSan<'t> {
    /// Maps `[T×d]` to `[T×d]`. Padded rows come out as zeros and are never
    /// attended to by valid rows.
    pub fn apply(&self, x: Var<'t>, direction: Direction, mask: &LevelMask) -> Result<Var<'t>> {
        let (t, _) = check_input("directional_san", &x, mask)?;
        if mask.valid_count() == 0 {
            return Err(TensorError::DegenerateSlice {
                op: "directional_san",
                slice: 0,
            });
        }
        let tape = x.tape();
        let c = self.scale;
        let query = x.matmul_nt(self.wq)?;
        let key = x.matmul_nt(self.wk)?.add_bias(self.b_attn)?;
        let scores = pairwise_add(query, key)?.scale(1.0 / c)?.tanh()?.scale(c)?;

        let mut allowed = Vec::with_capacity(t * t);
        for i in 0..t {
            for j in 0..t {
                allowed.push(if mask.is_valid(i) {
                    mask.is_valid(j) && direction.allows(i, j)
                } else {
                    // padded rows attend to themselves only; zeroed below
                    i == j
                });
            }
        }
        let weights = scores.masked_softmax(1, &Mask::new(vec![t, t, 1], allowed)?)?;
        let summary = attend(weights, x)?;

        let gate = summary
            .matmul_nt(self.wf)?
            .add(x.matmul_nt(self.wx)?)?
            .add_bias(self.bf)?
            .sigmoid()?;
        let fused = summary.add(gate.mul(x.sub(summary)?)?)?;
        fused.mul(tape.constant(mask.row_scale()?))
    }
}

/// Forward and backward directional blocks, concatenated to `[T×2d]`.
pub fn bisan<'t>(
    x: Var<'t>,
    mask: &LevelMask,
    forward: &DirectionalSan<'t>,
    backward: &DirectionalSan<'t>,
) -> Result<Var<'t>> {
    let fw = forward.apply(x, Direction::Forward, mask)?;
    let bw = backward.apply(x, Direction::Backward, mask)?;
    concat(&[fw, bw])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::random_tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    // --- scalar oracles, written directly from the defining formulas ---

    fn elu(x: f64) -> f64 {
        if x > 0.0 {
            x
        } else {
            x.exp() - 1.0
        }
    }

    fn sig(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    /// f(x_t)[k] = Σ_h W[h,k]·elu(Σ_j W1[h,j] x_t[j] + b1[h]) + b[k], softmax
    /// over valid t per k, weighted sum.
    fn source2token_oracle(p: &Source2TokenParams, x: &[Vec<f64>], valid: &[bool]) -> (Vec<f64>, Vec<Vec<f64>>) {
        let d_in = x[0].len();
        let d_h = p.w1.shape()[0];
        let scores: Vec<Vec<f64>> = x
            .iter()
            .map(|xt| {
                let hidden: Vec<f64> = (0..d_h)
                    .map(|h| {
                        let mut acc = p.b1.data()[h];
                        for j in 0..d_in {
                            acc += p.w1.at(&[h, j]) * xt[j];
                        }
                        elu(acc)
                    })
                    .collect();
                (0..d_in)
                    .map(|k| {
                        let mut acc = p.b.data()[k];
                        for h in 0..d_h {
                            acc += p.w.at(&[h, k]) * hidden[h];
                        }
                        acc
                    })
                    .collect()
            })
            .collect();
        let mut weights = vec![vec![0.0; d_in]; x.len()];
        let mut summary = vec![0.0; d_in];
        for k in 0..d_in {
            let z: f64 = (0..x.len()).filter(|&t| valid[t]).map(|t| scores[t][k].exp()).sum();
            for t in 0..x.len() {
                if valid[t] {
                    weights[t][k] = scores[t][k].exp() / z;
                    summary[k] += weights[t][k] * x[t][k];
                }
            }
        }
        (summary, weights)
    }

    /// Double loop over (i, j) pairs.
    fn directional_oracle(p: &DirectionalSanParams, x: &[Vec<f64>], dir: Direction) -> Vec<Vec<f64>> {
        let t = x.len();
        let d = x[0].len();
        let lin = |w: &Tensor, v: &[f64], r: usize| -> f64 { (0..d).map(|j| w.at(&[r, j]) * v[j]).sum() };
        let c = p.scale;
        (0..t)
            .map(|i| {
                let mut s = vec![0.0; d];
                for k in 0..d {
                    let mut z = 0.0;
                    let mut acc = 0.0;
                    for j in 0..t {
                        if !dir.allows(i, j) {
                            continue;
                        }
                        let score = c * ((lin(&p.wq, &x[i], k) + lin(&p.wk, &x[j], k) + p.b_attn.data()[k]) / c).tanh();
                        z += score.exp();
                        acc += score.exp() * x[j][k];
                    }
                    s[k] = acc / z;
                }
                (0..d)
                    .map(|k| {
                        let g = sig(lin(&p.wf, &s, k) + lin(&p.wx, &x[i], k) + p.bf.data()[k]);
                        g * x[i][k] + (1.0 - g) * s[k]
                    })
                    .collect()
            })
            .collect()
    }

    fn rows(t: &Tensor) -> Vec<Vec<f64>> {
        t.data().chunks(t.shape()[1]).map(<[f64]>::to_vec).collect()
    }

    fn randomize_biases(rng: &mut ChaCha8Rng, p: &mut DirectionalSanParams) {
        p.b_attn = random_tensor(rng, p.b_attn.shape(), 0.5);
        p.bf = random_tensor(rng, p.bf.shape(), 0.5);
    }

    #[test]
    fn source2token_single_token_is_identity() {
        let mut r = rng(1);
        let params = Source2TokenParams::init(&mut r, 3, 3);
        let tape = Tape::new();
        let s2t = params.bind(&tape, Activation::Elu);
        let x = random_tensor(&mut r, &[1, 3], 2.0);
        let (summary, weights) = s2t.apply(tape.constant(x.clone()), &LevelMask::all_valid(1)).unwrap();
        assert_eq!(summary.value().data(), x.data());
        assert!(weights.value().data().iter().all(|&w| w == 1.0));
    }

    #[test]
    fn source2token_identical_tokens() {
        let mut r = rng(2);
        let params = Source2TokenParams::init(&mut r, 2, 2);
        let tape = Tape::new();
        let s2t = params.bind(&tape, Activation::Elu);
        let x = Tensor::from_rows(&[vec![0.7, -1.2], vec![0.7, -1.2]]).unwrap();
        let (summary, weights) = s2t.apply(tape.constant(x), &LevelMask::all_valid(2)).unwrap();
        for (a, b) in summary.value().data().iter().zip([0.7, -1.2]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(weights.value().data().iter().all(|&w| (w - 0.5).abs() < 1e-15));
    }

    #[test]
    fn source2token_matches_direct_oracle() {
        let params = Source2TokenParams {
            w1: Tensor::from_rows(&[vec![0.5, -0.3], vec![0.2, 0.8]]).unwrap(),
            b1: Tensor::vector(vec![0.1, -0.2]).unwrap(),
            w: Tensor::from_rows(&[vec![1.0, -0.5], vec![0.3, 0.9]]).unwrap(),
            b: Tensor::vector(vec![0.05, -0.1]).unwrap(),
        };
        let x = vec![vec![1.0, 2.0], vec![-0.5, 0.3], vec![0.8, -1.1]];
        let (want_summary, want_weights) = source2token_oracle(&params, &x, &[true; 3]);
        let tape = Tape::new();
        let s2t = params.bind(&tape, Activation::Elu);
        let (summary, weights) = s2t
            .apply(tape.constant(Tensor::from_rows(&x).unwrap()), &LevelMask::all_valid(3))
            .unwrap();
        for (a, b) in summary.value().data().iter().zip(&want_summary) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        for (a, b) in weights.value().data().iter().zip(want_weights.iter().flatten()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn source2token_masked_positions_and_errors() {
        let mut r = rng(3);
        let params = Source2TokenParams::init(&mut r, 2, 4);
        let x = random_tensor(&mut r, &[4, 2], 2.0);
        let valid = [true, false, true, false];
        let (want, _) = source2token_oracle(&params, &rows(&x), &valid);
        let tape = Tape::new();
        let s2t = params.bind(&tape, Activation::Elu);
        let (summary, weights) = s2t
            .apply(tape.constant(x.clone()), &LevelMask::new(valid.to_vec()))
            .unwrap();
        for (a, b) in summary.value().data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
        let w = weights.value();
        assert!(w.row(1).iter().chain(w.row(3)).all(|&v| v == 0.0));

        let err = s2t
            .apply(tape.constant(x.clone()), &LevelMask::new(vec![false; 4]))
            .unwrap_err();
        assert!(matches!(err, TensorError::DegenerateSlice { .. }));
        assert!(s2t.apply(tape.constant(x), &LevelMask::all_valid(3)).is_err());
    }

    #[test]
    fn directional_single_token_is_identity() {
        let mut r = rng(4);
        let params = DirectionalSanParams::init(&mut r, 3);
        let tape = Tape::new();
        let san = params.bind(&tape);
        let x = random_tensor(&mut r, &[1, 3], 2.0);
        for dir in [Direction::Forward, Direction::Backward] {
            let out = san.apply(tape.constant(x.clone()), dir, &LevelMask::all_valid(1)).unwrap();
            for (a, b) in out.value().data().iter().zip(x.data()) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn directional_matches_double_loop_oracle() {
        let mut r = rng(5);
        let mut params = DirectionalSanParams::init(&mut r, 2);
        randomize_biases(&mut r, &mut params);
        let x = Tensor::from_rows(&[vec![0.4, -1.0], vec![1.5, 0.2], vec![-0.7, 0.9]]).unwrap();
        for dir in [Direction::Forward, Direction::Backward] {
            let want = directional_oracle(&params, &rows(&x), dir);
            let tape = Tape::new();
            let out = params
                .bind(&tape)
                .apply(tape.constant(x.clone()), dir, &LevelMask::all_valid(3))
                .unwrap()
                .value();
            for (a, b) in out.data().iter().zip(want.iter().flatten()) {
                assert!((a - b).abs() < 1e-12, "{dir:?}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn forward_first_position_attends_only_to_itself() {
        // With s_1 = x_1 the gate mixes equal points, so output row 0 = x_1.
        let mut r = rng(6);
        let params = DirectionalSanParams::init(&mut r, 4);
        let x = random_tensor(&mut r, &[5, 4], 2.0);
        let tape = Tape::new();
        let out = params
            .bind(&tape)
            .apply(tape.constant(x.clone()), Direction::Forward, &LevelMask::all_valid(5))
            .unwrap()
            .value();
        for (a, b) in out.row(0).iter().zip(x.row(0)) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn padded_rows_are_zero() {
        let mut r = rng(7);
        let params = DirectionalSanParams::init(&mut r, 3);
        let x = random_tensor(&mut r, &[4, 3], 2.0);
        let tape = Tape::new();
        let out = params
            .bind(&tape)
            .apply(tape.constant(x), Direction::Backward, &LevelMask::prefix(2, 4))
            .unwrap()
            .value();
        assert!(out.row(2).iter().chain(out.row(3)).all(|&v| v == 0.0));
    }

    #[test]
    fn bisan_single_token_duplicates_input() {
        let mut r = rng(8);
        let fw = DirectionalSanParams::init(&mut r, 3);
        let bw = DirectionalSanParams::init(&mut r, 3);
        let x = random_tensor(&mut r, &[1, 3], 2.0);
        let tape = Tape::new();
        let out = bisan(tape.constant(x.clone()), &LevelMask::all_valid(1), &fw.bind(&tape), &bw.bind(&tape))
            .unwrap()
            .value();
        assert_eq!(out.shape(), &[1, 6]);
        let want: Vec<f64> = x.data().iter().chain(x.data()).copied().collect();
        for (a, b) in out.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn bisan_two_tokens_is_concat_of_oracles() {
        let mut r = rng(9);
        let mut fw = DirectionalSanParams::init(&mut r, 2);
        let mut bw = DirectionalSanParams::init(&mut r, 2);
        randomize_biases(&mut r, &mut fw);
        randomize_biases(&mut r, &mut bw);
        let x = Tensor::from_rows(&[vec![0.3, -0.8], vec![-1.4, 0.6]]).unwrap();
        let f = directional_oracle(&fw, &rows(&x), Direction::Forward);
        let b = directional_oracle(&bw, &rows(&x), Direction::Backward);
        let tape = Tape::new();
        let out = bisan(tape.constant(x), &LevelMask::all_valid(2), &fw.bind(&tape), &bw.bind(&tape))
            .unwrap()
            .value();
        for i in 0..2 {
            let want: Vec<f64> = f[i].iter().chain(&b[i]).copied().collect();
            for (a, w) in out.row(i).iter().zip(&want) {
                assert!((a - w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        use crate::gradcheck::check_gradients;
        let mut r = rng(10);
        let mut san = DirectionalSanParams::init(&mut r, 3);
        randomize_biases(&mut r, &mut san);
        let s2t = Source2TokenParams::init(&mut r, 6, 4);
        let x = random_tensor(&mut r, &[4, 3], 2.0);
        let mask = LevelMask::prefix(3, 4);
        let inputs = vec![
            x,
            san.wq.clone(),
            san.wk.clone(),
            san.b_attn.clone(),
            san.wf.clone(),
            san.wx.clone(),
            san.bf.clone(),
            s2t.w1.clone(),
            s2t.b1.clone(),
            s2t.w.clone(),
            s2t.b.clone(),
        ];
        let report = check_gradients(&inputs, |_, v| {
            let block = DirectionalSan {
                wq: v[1],
                wk: v[2],
                b_attn: v[3],
                wf: v[4],
                wx: v[5],
                bf: v[6],
                scale: DEFAULT_SCALE,
            };
            let pooled = Source2Token {
                w1: v[7],
                b1: v[8],
                w: v[9],
                b: v[10],
                activation: Activation::Elu,
            };
            let h = bisan(v[0], &mask, &block, &block)?;
            let (summary, _) = pooled.apply(h, &mask)?;
            summary.mul(summary)?.sum()
        })
        .unwrap();
        assert!(report.passed(1e-4, 1e-7), "{:?}", report.failures(1e-4, 1e-7));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn matrix(t: usize, d: usize) -> impl Strategy<Value = Tensor> {
            prop::collection::vec(-2.0f64..2.0, t * d).prop_map(move |v| Tensor::matrix(t, d, v).unwrap())
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn source2token_is_convex(seed in any::<u64>(), x in matrix(5, 3), valid in 1usize..=5) {
                let params = Source2TokenParams::init(&mut rng(seed), 3, 3);
                let tape = Tape::new();
                let mask = LevelMask::prefix(valid, 5);
                let (summary, weights) = params.bind(&tape, Activation::Elu)
                    .apply(tape.constant(x.clone()), &mask).unwrap();
                let (summary, weights) = (summary.value(), weights.value());
                for k in 0..3 {
                    let col: Vec<f64> = (0..valid).map(|t| x.at(&[t, k])).collect();
                    let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
                    let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    prop_assert!(summary.data()[k] >= lo - 1e-12 && summary.data()[k] <= hi + 1e-12);
                    let total: f64 = (0..valid).map(|t| weights.at(&[t, k])).sum();
                    prop_assert!((total - 1.0).abs() < 1e-12);
                    for t in valid..5 {
                        prop_assert_eq!(weights.at(&[t, k]), 0.0);
                    }
                }
            }

            #[test]
            fn padding_leaves_valid_outputs_unchanged(seed in any::<u64>(), x in matrix(3, 2), pad in matrix(2, 2)) {
                let mut r = rng(seed);
                let san = DirectionalSanParams::init(&mut r, 2);
                let s2t = Source2TokenParams::init(&mut r, 2, 2);
                let padded = Tensor::matrix(5, 2, x.data().iter().chain(pad.data()).copied().collect()).unwrap();
                let tape = Tape::new();
                let block = san.bind(&tape);
                let pool = s2t.bind(&tape, Activation::Elu);
                for dir in [Direction::Forward, Direction::Backward] {
                    let a = block.apply(tape.constant(x.clone()), dir, &LevelMask::all_valid(3)).unwrap().value();
                    let b = block.apply(tape.constant(padded.clone()), dir, &LevelMask::prefix(3, 5)).unwrap().value();
                    for (u, v) in a.data().iter().zip(&b.data()[..6]) {
                        prop_assert!((u - v).abs() < 1e-10);
                    }
                }
                let (a, _) = pool.apply(tape.constant(x.clone()), &LevelMask::all_valid(3)).unwrap();
                let (b, _) = pool.apply(tape.constant(padded), &LevelMask::prefix(3, 5)).unwrap();
                for (u, v) in a.value().data().iter().zip(b.value().data()) {
                    prop_assert!((u - v).abs() < 1e-10);
                }
            }

            #[test]
            fn gate_output_stays_in_hull(seed in any::<u64>(), x in matrix(4, 3)) {
                // s_i lies in the hull of attendable inputs; the output lies in
                // the hull of {x_i, s_i}, hence in the hull of attendable inputs.
                let params = DirectionalSanParams::init(&mut rng(seed), 3);
                let tape = Tape::new();
                let out = params.bind(&tape)
                    .apply(tape.constant(x.clone()), Direction::Forward, &LevelMask::all_valid(4))
                    .unwrap().value();
                for i in 0..4 {
                    for k in 0..3 {
                        let col: Vec<f64> = (0..=i).map(|j| x.at(&[j, k])).collect();
                        let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
                        let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        let v = out.at(&[i, k]);
                        prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
                    }
                }
            }

            #[test]
            fn direction_reversal_equivariance(seed in any::<u64>(), x in matrix(4, 3)) {
                let params = DirectionalSanParams::init(&mut rng(seed), 3);
                let reversed = Tensor::from_rows(&rows(&x).into_iter().rev().collect::<Vec<_>>()).unwrap();
                let tape = Tape::new();
                let block = params.bind(&tape);
                let mask = LevelMask::all_valid(4);
                let fw = block.apply(tape.constant(x), Direction::Forward, &mask).unwrap().value();
                let bw_rev = block.apply(tape.constant(reversed), Direction::Backward, &mask).unwrap().value();
                for i in 0..4 {
                    for (a, b) in fw.row(i).iter().zip(bw_rev.row(3 - i)) {
                        prop_assert!((a - b).abs() < 1e-12);
                    }
                }
            }
        }
    }
}
