//! Patch embedding, masked transformer encoder, and the shared decoder.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use num_traits::Float;
use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Graph, Matrix, ParamVector, Real, Var};

/// Additive logit applied to padded attention keys.
pub const MASK_LOGIT: f64 = -1e9;
const LN_EPS: f64 = 1e-5;

/// Architecture hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    /// Patch length `L`.
    pub patch_len: usize,
    /// Maximum number of patches `N`.
    pub max_patches: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Decoder hidden width.
    pub d_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { patch_len: 8, max_patches: 64, d_model: 64, d_ff: 128, n_layers: 2, n_heads: 4, d_hidden: 128 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("patch_len", self.patch_len),
            ("max_patches", self.max_patches),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("n_heads", self.n_heads),
            ("d_hidden", self.d_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    /// Points per full window (`N · L`).
    pub fn window_len(&self) -> usize {
        self.patch_len * self.max_patches
    }
}

/// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
pub fn xavier<T: Real, R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Matrix<T> {
    let a = Float::sqrt(6.0 / (rows + cols) as f64);
    Matrix::from_fn(rows, cols, |_, _| T::of(rng.random_range(-a..a)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer<T> {
    pub ln1_gamma: Matrix<T>,
    pub ln1_beta: Matrix<T>,
    pub wq: Matrix<T>,
    pub wk: Matrix<T>,
    pub wv: Matrix<T>,
    pub wo: Matrix<T>,
    pub ln2_gamma: Matrix<T>,
    pub ln2_beta: Matrix<T>,
    pub ff1_w: Matrix<T>,
    pub ff1_b: Matrix<T>,
    pub ff2_w: Matrix<T>,
    pub ff2_b: Matrix<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<T> {
    pub patch_embed: Matrix<T>,
    pub embed_bias: Matrix<T>,
    pub pos: Matrix<T>,
    pub layers: Vec<EncoderLayer<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams<T> {
    pub w1: Matrix<T>,
    pub b1: Matrix<T>,
    pub w2: Matrix<T>,
    pub b2: Matrix<T>,
}

impl<T: Real> EncoderParams<T> {
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.d_model;
        let layers = (0..cfg.n_layers)
            .map(|_| EncoderLayer {
                ln1_gamma: Matrix::filled(1, d, T::one()),
                ln1_beta: Matrix::zeros(1, d),
                wq: xavier(rng, d, d),
                wk: xavier(rng, d, d),
                wv: xavier(rng, d, d),
                wo: xavier(rng, d, d),
                ln2_gamma: Matrix::filled(1, d, T::one()),
                ln2_beta: Matrix::zeros(1, d),
                ff1_w: xavier(rng, d, cfg.d_ff),
                ff1_b: Matrix::zeros(1, cfg.d_ff),
                ff2_w: xavier(rng, cfg.d_ff, d),
                ff2_b: Matrix::zeros(1, d),
            })
            .collect();
        Self {
            patch_embed: xavier(rng, cfg.patch_len, d),
            embed_bias: Matrix::zeros(1, d),
            pos: xavier(rng, cfg.max_patches, d),
            layers,
        }
    }

    pub fn tensors(&self) -> Vec<(String, &Matrix<T>)> {
        let mut out = Vec::new();
        out.push((String::from("encoder.patch_embed"), &self.patch_embed));
        out.push((String::from("encoder.embed_bias"), &self.embed_bias));
        out.push((String::from("encoder.pos"), &self.pos));
        for (i, l) in self.layers.iter().enumerate() {
            for (name, m) in l.named() {
                out.push((format!("encoder.layer{i}.{name}"), m));
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix<T>> {
        let mut out: Vec<&mut Matrix<T>> = Vec::new();
        out.push(&mut self.patch_embed);
        out.push(&mut self.embed_bias);
        out.push(&mut self.pos);
        for l in &mut self.layers {
            out.extend(l.named_mut());
        }
        out
    }

    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        let expected = EncoderParams::<T>::init(cfg, &mut NullRng);
        check_same_shapes(&expected.tensors(), &self.tensors())
    }
}

impl<T: Real> EncoderLayer<T> {
    fn named(&self) -> [(&'static str, &Matrix<T>); 12] {
        [
            ("ln1_gamma", &self.ln1_gamma),
            ("ln1_beta", &self.ln1_beta),
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("ln2_gamma", &self.ln2_gamma),
            ("ln2_beta", &self.ln2_beta),
            ("ff1_w", &self.ff1_w),
            ("ff1_b", &self.ff1_b),
            ("ff2_w", &self.ff2_w),
            ("ff2_b", &self.ff2_b),
        ]
    }

    fn named_mut(&mut self) -> [&mut Matrix<T>; 12] {
        [
            &mut self.ln1_gamma,
            &mut self.ln1_beta,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ln2_gamma,
            &mut self.ln2_beta,
            &mut self.ff1_w,
            &mut self.ff1_b,
            &mut self.ff2_w,
            &mut self.ff2_b,
        ]
    }
}

impl<T: Real> DecoderParams<T> {
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        Self {
            w1: xavier(rng, 2 * cfg.d_model, cfg.d_hidden),
            b1: Matrix::zeros(1, cfg.d_hidden),
            w2: xavier(rng, cfg.d_hidden, cfg.patch_len),
            b2: Matrix::zeros(1, cfg.patch_len),
        }
    }

    pub fn tensors(&self) -> Vec<(String, &Matrix<T>)> {
        alloc::vec![
            (String::from("decoder.w1"), &self.w1),
            (String::from("decoder.b1"), &self.b1),
            (String::from("decoder.w2"), &self.w2),
            (String::from("decoder.b2"), &self.b2),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix<T>> {
        alloc::vec![&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}

fn check_same_shapes<T: Real>(expected: &[(String, &Matrix<T>)], got: &[(String, &Matrix<T>)]) -> Result<()> {
    if expected.len() != got.len() {
        return Err(Error::Shape(format!("expected {} tensors, got {}", expected.len(), got.len())));
    }
    for ((name, e), (_, g)) in expected.iter().zip(got) {
        if e.shape() != g.shape() {
            return Err(Error::Shape(format!("{name}: expected {:?}, got {:?}", e.shape(), g.shape())));
        }
    }
    Ok(())
}

/// Deterministic zero source used only to materialize reference shapes.
struct NullRng;

impl rand::RngCore for NullRng {
    fn next_u32(&mut self) -> u32 {
        0
    }
    fn next_u64(&mut self) -> u64 {
        0
    }
    fn fill_bytes(&mut self, dst: &mut [u8]) {
        dst.fill(0);
    }
}

/// Encoder plus decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub cfg: ModelConfig,
    pub encoder: EncoderParams<T>,
    pub decoder: DecoderParams<T>,
}

/// Graph handles for one bound encoder layer.
pub struct LayerVars {
    ln1_gamma: Var,
    ln1_beta: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    ln2_gamma: Var,
    ln2_beta: Var,
    ff1_w: Var,
    ff1_b: Var,
    ff2_w: Var,
    ff2_b: Var,
}

/// Graph handles for every model tensor, in [`Model::tensors`] order.
pub struct ModelVars {
    patch_embed: Var,
    embed_bias: Var,
    pos: Var,
    layers: Vec<LayerVars>,
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
    pub all: Vec<Var>,
}

impl<T: Real> Model<T> {
    /// Correctly shaped model with placeholder values, for loading into.
    pub fn template(cfg: ModelConfig) -> Result<Self> {
        Self::init(cfg, &mut NullRng)
    }

    pub fn init<R: Rng + ?Sized>(cfg: ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let encoder = EncoderParams::init(&cfg, rng);
        let decoder = DecoderParams::init(&cfg, rng);
        Ok(Self { cfg, encoder, decoder })
    }

    pub fn tensors(&self) -> Vec<(String, &Matrix<T>)> {
        let mut t = self.encoder.tensors();
        t.extend(self.decoder.tensors());
        t
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix<T>> {
        let mut t = self.encoder.tensors_mut();
        t.extend(self.decoder.tensors_mut());
        t
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.len()).sum()
    }

    pub fn to_param_vector(&self) -> ParamVector<T> {
        let mut p = ParamVector::new();
        for (name, m) in self.tensors() {
            p.push(name, m);
        }
        p
    }

    /// Overwrites tensors from a flat vector with the same layout.
    pub fn load_param_vector(&mut self, p: &ParamVector<T>) -> Result<()> {
        let names: Vec<String> = self.tensors().into_iter().map(|(n, _)| n).collect();
        for (name, slot) in names.iter().zip(self.tensors_mut()) {
            let m = p.matrix(name)?;
            if m.shape() != slot.shape() {
                return Err(Error::Shape(format!("{name}: {:?} vs {:?}", m.shape(), slot.shape())));
            }
            *slot = m;
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        let mut out = Model::<U>::init(self.cfg, &mut NullRng).expect("validated config");
        for (dst, (_, src)) in out.tensors_mut().into_iter().zip(self.tensors()) {
            *dst = src.cast();
        }
        out
    }

    /// Adds every tensor to `g` as a parameter (`trainable`) or constant.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> ModelVars {
        let mut all = Vec::new();
        let mut leaf = |g: &mut Graph<T>, m: &Matrix<T>| {
            let v = if trainable { g.param(m.clone()) } else { g.constant(m.clone()) };
            all.push(v);
            v
        };
        let e = &self.encoder;
        let patch_embed = leaf(g, &e.patch_embed);
        let embed_bias = leaf(g, &e.embed_bias);
        let pos = leaf(g, &e.pos);
        let layers = e
            .layers
            .iter()
            .map(|l| LayerVars {
                ln1_gamma: leaf(g, &l.ln1_gamma),
                ln1_beta: leaf(g, &l.ln1_beta),
                wq: leaf(g, &l.wq),
                wk: leaf(g, &l.wk),
                wv: leaf(g, &l.wv),
                wo: leaf(g, &l.wo),
                ln2_gamma: leaf(g, &l.ln2_gamma),
                ln2_beta: leaf(g, &l.ln2_beta),
                ff1_w: leaf(g, &l.ff1_w),
                ff1_b: leaf(g, &l.ff1_b),
                ff2_w: leaf(g, &l.ff2_w),
                ff2_b: leaf(g, &l.ff2_b),
            })
            .collect();
        let d = &self.decoder;
        let w1 = leaf(g, &d.w1);
        let b1 = leaf(g, &d.b1);
        let w2 = leaf(g, &d.w2);
        let b2 = leaf(g, &d.b2);
        ModelVars { patch_embed, embed_bias, pos, layers, w1, b1, w2, b2, all }
    }

    fn check_input(&self, patches: &Matrix<T>, mask: &[bool]) -> Result<usize> {
        let (n, l) = (self.cfg.max_patches, self.cfg.patch_len);
        if patches.shape() != (n, l) || mask.len() != n {
            return Err(Error::Shape(format!(
                "expected {n}x{l} patches with {n}-long mask, got {:?} and {}",
                patches.shape(),
                mask.len()
            )));
        }
        let p = mask.iter().take_while(|&&m| m).count();
        if mask[p..].iter().any(|&m| m) {
            return Err(Error::InvalidArgument("mask must be a prefix of ones".into()));
        }
        Ok(p)
    }

    /// Token embedding on the graph; padded rows are zeroed.
    pub fn embed_graph(&self, g: &mut Graph<T>, vars: &ModelVars, patches: &Matrix<T>, mask: &[bool]) -> Result<Var> {
        self.check_input(patches, mask)?;
        let x = g.constant(patches.clone());
        let tokens = g.matmul(x, vars.patch_embed)?;
        let tokens = g.add_row(tokens, vars.embed_bias)?;
        let tokens = g.add(tokens, vars.pos)?;
        let keep = Matrix::from_fn(self.cfg.max_patches, self.cfg.d_model, |r, _| {
            if mask[r] {
                T::one()
            } else {
                T::zero()
            }
        });
        let keep = g.constant(keep);
        g.mul(tokens, keep)
    }

    /// Self-attention stack; returns the `P` observed rows.
    pub fn encode_graph(&self, g: &mut Graph<T>, vars: &ModelVars, tokens: Var, mask: &[bool]) -> Result<Var> {
        let n = self.cfg.max_patches;
        if g.value(tokens).shape() != (n, self.cfg.d_model) || mask.len() != n {
            return Err(Error::Shape("encode input does not match configuration".into()));
        }
        let p = mask.iter().take_while(|&&m| m).count();
        let bias = Matrix::from_fn(n, n, |_, c| if mask[c] { T::zero() } else { T::of(MASK_LOGIT) });
        let dh = self.cfg.d_model / self.cfg.n_heads;
        let inv_sqrt = T::of(1.0 / Float::sqrt(dh as f64));
        let mut x = tokens;
        for lv in &vars.layers {
            let h = g.layer_norm(x, lv.ln1_gamma, lv.ln1_beta, LN_EPS)?;
            let q = g.matmul(h, lv.wq)?;
            let k = g.matmul(h, lv.wk)?;
            let v = g.matmul(h, lv.wv)?;
            let mut heads = Vec::with_capacity(self.cfg.n_heads);
            for head in 0..self.cfg.n_heads {
                let qh = g.slice_cols(q, head * dh, dh)?;
                let kh = g.slice_cols(k, head * dh, dh)?;
                let vh = g.slice_cols(v, head * dh, dh)?;
                let scores = g.matmul_nt(qh, kh)?;
                let scores = g.scale(scores, inv_sqrt);
                let scores = g.add_const(scores, &bias)?;
                let attn = g.row_softmax(scores, 1.0)?;
                heads.push(g.matmul(attn, vh)?);
            }
            let cat = g.concat_cols(&heads)?;
            let out = g.matmul(cat, lv.wo)?;
            x = g.add(x, out)?;
            let h2 = g.layer_norm(x, lv.ln2_gamma, lv.ln2_beta, LN_EPS)?;
            let f = g.matmul(h2, lv.ff1_w)?;
            let f = g.add_row(f, lv.ff1_b)?;
            let f = g.gelu(f);
            let f = g.matmul(f, lv.ff2_w)?;
            let f = g.add_row(f, lv.ff2_b)?;
            x = g.add(x, f)?;
        }
        g.slice_rows(x, 0, p)
    }

    /// Row-wise two-layer decoder over `P × 2·d_model` input.
    pub fn decode_graph(&self, g: &mut Graph<T>, vars: &ModelVars, q_cat: Var) -> Result<Var> {
        let width = g.value(q_cat).cols();
        if width != 2 * self.cfg.d_model {
            return Err(Error::Shape(format!(
                "decoder expects width {}, got {width}",
                2 * self.cfg.d_model
            )));
        }
        let h = g.matmul(q_cat, vars.w1)?;
        let h = g.add_row(h, vars.b1)?;
        let h = g.gelu(h);
        let out = g.matmul(h, vars.w2)?;
        g.add_row(out, vars.b2)
    }

    pub fn embed(&self, patches: &Matrix<T>, mask: &[bool]) -> Result<Matrix<T>> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let t = self.embed_graph(&mut g, &vars, patches, mask)?;
        Ok(g.value(t).clone())
    }

    pub fn encode(&self, tokens: &Matrix<T>, mask: &[bool]) -> Result<Matrix<T>> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let t = g.constant(tokens.clone());
        let q = self.encode_graph(&mut g, &vars, t, mask)?;
        Ok(g.value(q).clone())
    }

    /// `embed` followed by `encode`.
    pub fn represent(&self, patches: &Matrix<T>, mask: &[bool]) -> Result<Matrix<T>> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let t = self.embed_graph(&mut g, &vars, patches, mask)?;
        let q = self.encode_graph(&mut g, &vars, t, mask)?;
        Ok(g.value(q).clone())
    }

    pub fn decode(&self, q_cat: &Matrix<T>) -> Result<Matrix<T>> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let x = g.constant(q_cat.clone());
        let y = self.decode_graph(&mut g, &vars, x)?;
        Ok(g.value(y).clone())
    }
}
