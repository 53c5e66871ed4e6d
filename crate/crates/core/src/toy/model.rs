use std::sync::Arc;

use super::plant::PlantState;
use super::{PositionEncoding, SplitMix64, ToyConfig, WEIGHT_SCALE};
use crate::decoder::{ModelBackend, StepOutput, VisualInput};
use crate::error::{Error, Result};
use crate::revision::{project_hidden, ModelDims, Unembedding};
use crate::tensor::{dot, Matrix};

const NORM_EPS: f32 = 1e-5;
const FF_MULT: usize = 4;

#[derive(Debug)]
struct LayerWeights {
    wq: Matrix,
    wk: Matrix,
    wv: Matrix,
    wo: Matrix,
    w_in: Matrix,
    w_out: Matrix,
}

#[derive(Debug)]
struct Weights {
    token: Matrix,
    position: Option<Matrix>,
    layers: Vec<LayerWeights>,
}

/// The seeded toy backend. Cloning shares the weights.
#[derive(Debug, Clone)]
pub struct ToyModel {
    config: ToyConfig,
    weights: Arc<Weights>,
    unembedding: Unembedding,
    plant: Option<Arc<PlantState>>,
}

/// Per-sequence state: key/value cache plus the visual hidden states captured
/// at prefill.
#[derive(Debug, Clone)]
pub struct ToySession {
    keys: Vec<Vec<Vec<f32>>>,
    values: Vec<Vec<Vec<f32>>>,
    visual_hidden: Vec<Matrix>,
    n_prompt: usize,
    tokens: Vec<u32>,
}

impl ToySession {
    /// Prompt followed by every token stepped so far.
    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.keys.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn rms_norm(x: &[f32]) -> Vec<f32> {
    let mut ss = 0.0f32;
    for v in x {
        ss += v * v;
    }
    let inv = 1.0 / (ss / x.len() as f32 + NORM_EPS).sqrt();
    x.iter().map(|v| v * inv).collect()
}

fn add_assign(x: &mut [f32], y: &[f32]) {
    for (a, b) in x.iter_mut().zip(y) {
        *a += b;
    }
}

fn apply_rope(x: &mut [f32], pos: usize, head_dim: usize) {
    for head in x.chunks_exact_mut(head_dim) {
        for i in 0..head_dim / 2 {
            let theta = pos as f32 / 10000f32.powf(2.0 * i as f32 / head_dim as f32);
            let (s, c) = theta.sin_cos();
            let (a, b) = (head[2 * i], head[2 * i + 1]);
            head[2 * i] = a * c - b * s;
            head[2 * i + 1] = a * s + b * c;
        }
    }
}

/// Causal attention of one query over `keys[..]`/`values[..]` (all visible).
fn attend(q: &[f32], keys: &[Vec<f32>], values: &[Vec<f32>], n_heads: usize) -> Vec<f32> {
    let d = q.len();
    let hd = d / n_heads;
    let scale = 1.0 / (hd as f32).sqrt();
    let mut out = vec![0.0f32; d];
    let mut scores = vec![0.0f32; keys.len()];
    for h in 0..n_heads {
        let r = h * hd..(h + 1) * hd;
        let mut max = f32::NEG_INFINITY;
        for (j, k) in keys.iter().enumerate() {
            scores[j] = dot(&q[r.clone()], &k[r.clone()]) * scale;
            max = max.max(scores[j]);
        }
        let mut sum = 0.0f32;
        for s in scores.iter_mut() {
            *s = (*s - max).exp();
            sum += *s;
        }
        for (j, v) in values.iter().enumerate() {
            let w = scores[j] / sum;
            for i in r.clone() {
                out[i] += w * v[i];
            }
        }
    }
    out
}

impl ToyModel {
    pub(crate) fn new(config: ToyConfig) -> Result<Self> {
        config.validate()?;
        let (v, d) = (config.vocab_size, config.d_model);
        let ff = FF_MULT * d;
        let mut rng = SplitMix64::new(config.seed);
        let mut draw = |rows: usize, cols: usize| {
            Matrix::from_vec(rows, cols, rng.fill(rows * cols, WEIGHT_SCALE)).expect("shape by construction")
        };
        let token = draw(v, d);
        let position = match config.positions {
            PositionEncoding::Learned => Some(draw(config.max_positions, d)),
            PositionEncoding::Rope => None,
        };
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                wq: draw(d, d),
                wk: draw(d, d),
                wv: draw(d, d),
                wo: draw(d, d),
                w_in: draw(ff, d),
                w_out: draw(d, ff),
            })
            .collect();
        let unembedding = Unembedding::new(draw(v, d))?;
        Ok(Self {
            config,
            weights: Arc::new(Weights { token, position, layers }),
            unembedding,
            plant: None,
        })
    }

    pub fn config(&self) -> &ToyConfig {
        &self.config
    }

    pub(crate) fn unembedding_ref(&self) -> &Unembedding {
        &self.unembedding
    }

    pub(crate) fn with_plant(&self, plant: Option<PlantState>) -> Self {
        Self {
            plant: plant.map(Arc::new),
            ..self.clone()
        }
    }

    /// Flat copy of every weight in draw order.
    pub fn weights_flat(&self) -> Vec<f32> {
        let w = &self.weights;
        let mut out = w.token.as_slice().to_vec();
        if let Some(p) = &w.position {
            out.extend_from_slice(p.as_slice());
        }
        for l in &w.layers {
            for m in [&l.wq, &l.wk, &l.wv, &l.wo, &l.w_in, &l.w_out] {
                out.extend_from_slice(m.as_slice());
            }
        }
        out.extend_from_slice(self.unembedding.matrix().as_slice());
        out
    }

    fn check_visual(&self, visual: &VisualInput) -> Result<Matrix> {
        let VisualInput::Embeddings(m) = visual else {
            return Err(Error::Backend("the toy backend needs visual embeddings, not an image reference".into()));
        };
        let (p, d) = (self.config.n_visual, self.config.d_model);
        if m.rows() != p || m.cols() != d {
            return Err(Error::shape(format!("{p}x{d} visual embeddings"), format!("{}x{}", m.rows(), m.cols())));
        }
        let mut m = m.clone();
        if let Some(plant) = &self.plant {
            let s = plant.spec.strength as f32;
            let planted: Vec<usize> = plant.spec.region.clone().unwrap_or_else(|| (0..p).collect());
            for r in planted {
                for (x, g) in m.row_mut(r).iter_mut().zip(&plant.visual_target) {
                    *x = (1.0 - s) * *x + s * g;
                }
            }
        }
        Ok(m)
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::Argument(format!("token {t} outside vocabulary of {}", self.config.vocab_size)));
        }
        Ok(())
    }

    /// Text position whose outputs predict the plant's designated step.
    fn designated_position(&self, n_prompt: usize) -> Option<usize> {
        self.plant
            .as_ref()
            .map(|p| self.config.n_visual + n_prompt - 1 + p.spec.designated_step)
    }

    fn input_embedding(&self, pos: usize, visual: &Matrix, text: &[u32], n_prompt: usize) -> Result<Vec<f32>> {
        if pos >= self.config.max_positions {
            return Err(Error::Backend(format!(
                "position {pos} exceeds max_positions {}",
                self.config.max_positions
            )));
        }
        let p = self.config.n_visual;
        let mut x = if pos < p {
            visual.row(pos).to_vec()
        } else {
            self.weights.token.row(text[pos - p] as usize).to_vec()
        };
        if let Some(pe) = &self.weights.position {
            add_assign(&mut x, pe.row(pos));
        }
        if Some(pos) == self.designated_position(n_prompt) {
            add_assign(&mut x, &self.plant.as_ref().expect("plant").grounding);
        }
        Ok(x)
    }

    fn qkv(&self, layer: &LayerWeights, x: &[f32], pos: usize) -> Result<(Vec<f32>, Vec<f32>, Vec<f32>)> {
        let n = rms_norm(x);
        let mut q = layer.wq.matvec(&n)?;
        let mut k = layer.wk.matvec(&n)?;
        let v = layer.wv.matvec(&n)?;
        if self.config.positions == PositionEncoding::Rope {
            let hd = self.config.d_model / self.config.n_heads;
            apply_rope(&mut q, pos, hd);
            apply_rope(&mut k, pos, hd);
        }
        Ok((q, k, v))
    }

    fn finish_layer(&self, layer: &LayerWeights, x: &mut [f32], attn: &[f32]) -> Result<()> {
        add_assign(x, &layer.wo.matvec(attn)?);
        let mut h = layer.w_in.matvec(&rms_norm(x))?;
        for v in h.iter_mut() {
            *v = v.max(0.0);
        }
        add_assign(x, &layer.w_out.matvec(&h)?);
        Ok(())
    }

    fn finish_final(&self, pos: usize, n_prompt: usize, x: &mut [f32]) {
        if Some(pos) == self.designated_position(n_prompt) {
            add_assign(x, &self.plant.as_ref().expect("plant").prior);
        }
    }

    /// Runs one new position through every layer, extending the cache.
    /// Returns the hidden states `0..=n_layers` at that position.
    fn forward_position(&self, session: &mut ToySession, mut x: Vec<f32>, pos: usize) -> Result<Vec<Vec<f32>>> {
        let mut hidden = Vec::with_capacity(self.config.n_layers + 1);
        hidden.push(x.clone());
        for (l, layer) in self.weights.layers.iter().enumerate() {
            let (q, k, v) = self.qkv(layer, &x, pos)?;
            session.keys[l].push(k);
            session.values[l].push(v);
            let attn = attend(&q, &session.keys[l], &session.values[l], self.config.n_heads);
            self.finish_layer(layer, &mut x, &attn)?;
            if l + 1 == self.config.n_layers {
                self.finish_final(pos, session.n_prompt, &mut x);
            }
            hidden.push(x.clone());
        }
        Ok(hidden)
    }

    fn output(&self, hidden: &[Vec<f32>]) -> Result<StepOutput> {
        let n = self.config.n_layers;
        Ok(StepOutput {
            final_logits: project_hidden(&hidden[n], &self.unembedding)?,
            early_hidden: (1..n).map(|l| (l, hidden[l].clone())).collect(),
        })
    }

    /// Uncached forward pass over the whole sequence, one layer at a time.
    /// Returns `n_layers + 1` matrices of shape `T x d_model`. Used to check
    /// the cached path and causality.
    pub fn forward_full(&self, visual: &VisualInput, prompt: &[u32], generated: &[u32]) -> Result<Vec<Matrix>> {
        self.check_tokens(prompt)?;
        self.check_tokens(generated)?;
        let visual = self.check_visual(visual)?;
        let text: Vec<u32> = prompt.iter().chain(generated).copied().collect();
        let t_len = self.config.n_visual + text.len();
        let mut xs = (0..t_len)
            .map(|pos| self.input_embedding(pos, &visual, &text, prompt.len()))
            .collect::<Result<Vec<_>>>()?;
        let mut out = vec![Matrix::from_rows(&xs)?];
        for (l, layer) in self.weights.layers.iter().enumerate() {
            let mut qs = Vec::with_capacity(t_len);
            let mut ks = Vec::with_capacity(t_len);
            let mut vs = Vec::with_capacity(t_len);
            for (pos, x) in xs.iter().enumerate() {
                let (q, k, v) = self.qkv(layer, x, pos)?;
                qs.push(q);
                ks.push(k);
                vs.push(v);
            }
            for (pos, x) in xs.iter_mut().enumerate() {
                let attn = attend(&qs[pos], &ks[..=pos], &vs[..=pos], self.config.n_heads);
                self.finish_layer(layer, x, &attn)?;
                if l + 1 == self.config.n_layers {
                    self.finish_final(pos, prompt.len(), x);
                }
            }
            out.push(Matrix::from_rows(&xs)?);
        }
        Ok(out)
    }
}

impl ModelBackend for ToyModel {
    type Session = ToySession;

    fn dims(&self) -> ModelDims {
        ModelDims {
            n_layers: self.config.n_layers,
            d_model: self.config.d_model,
            vocab_size: self.config.vocab_size,
            n_visual: self.config.n_visual,
        }
    }

    fn unembedding(&self) -> &Unembedding {
        &self.unembedding
    }

    fn recorded_layers(&self) -> Vec<usize> {
        (1..self.config.n_layers).collect()
    }

    fn prefill(&self, prompt: &[u32], visual: &VisualInput) -> Result<(ToySession, StepOutput)> {
        if prompt.is_empty() {
            return Err(Error::Argument("prompt must be non-empty".into()));
        }
        self.check_tokens(prompt)?;
        let visual = self.check_visual(visual)?;
        let n = self.config.n_layers;
        let p = self.config.n_visual;
        let mut session = ToySession {
            keys: vec![Vec::new(); n],
            values: vec![Vec::new(); n],
            visual_hidden: vec![Matrix::zeros(p, self.config.d_model); n + 1],
            n_prompt: prompt.len(),
            tokens: prompt.to_vec(),
        };
        let mut last = Vec::new();
        for pos in 0..p + prompt.len() {
            let x = self.input_embedding(pos, &visual, prompt, prompt.len())?;
            let hidden = self.forward_position(&mut session, x, pos)?;
            if pos < p {
                for (l, h) in hidden.iter().enumerate() {
                    session.visual_hidden[l].row_mut(pos).copy_from_slice(h);
                }
            }
            last = hidden;
        }
        let out = self.output(&last)?;
        Ok((session, out))
    }

    fn step(&self, session: &mut ToySession, token: u32) -> Result<StepOutput> {
        self.check_tokens(&[token])?;
        session.tokens.push(token);
        let pos = self.config.n_visual + session.tokens.len() - 1;
        let text = &session.tokens;
        let x = {
            // visual rows are never read for text positions
            let dummy = Matrix::zeros(0, self.config.d_model);
            self.input_embedding(pos, &dummy, text, session.n_prompt)?
        };
        let hidden = self.forward_position(session, x, pos)?;
        self.output(&hidden)
    }

    fn visual_hidden(&self, session: &ToySession, layer: usize) -> Result<Matrix> {
        session
            .visual_hidden
            .get(layer)
            .cloned()
            .ok_or_else(|| Error::Lookup(format!("layer {layer} outside 0..={}", self.config.n_layers)))
    }

    fn fork(&self, session: &ToySession) -> Result<ToySession> {
        Ok(session.clone())
    }
}
