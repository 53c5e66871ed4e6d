#![allow(dead_code)]

use std::cell::Cell;
use std::collections::BTreeMap;

use saver::decoder::{ModelBackend, StepOutput, VisualInput};
use saver::revision::{
    build_sas_table, filter_candidates, log_softmax, project_hidden, revise_logits, select_layer, ModelDims,
    SaverParams, Unembedding,
};
use saver::tensor::Matrix;
use saver::toy::ToyModel;
use saver::Result;

/// A backend whose outputs are a fixed function of the generated history.
pub struct ScriptedBackend {
    pub dims: ModelDims,
    pub unembedding: Unembedding,
    pub visual: BTreeMap<usize, Matrix>,
    pub script: Box<dyn Fn(&[u32]) -> StepOutput>,
    pub steps: Cell<usize>,
}

impl ModelBackend for ScriptedBackend {
    type Session = Vec<u32>;

    fn dims(&self) -> ModelDims {
        self.dims
    }
    fn unembedding(&self) -> &Unembedding {
        &self.unembedding
    }
    fn recorded_layers(&self) -> Vec<usize> {
        self.visual.keys().copied().collect()
    }
    fn prefill(&self, _prompt: &[u32], _visual: &VisualInput) -> Result<(Vec<u32>, StepOutput)> {
        Ok((Vec::new(), (self.script)(&[])))
    }
    fn step(&self, session: &mut Vec<u32>, token: u32) -> Result<StepOutput> {
        self.steps.set(self.steps.get() + 1);
        session.push(token);
        Ok((self.script)(session))
    }
    fn visual_hidden(&self, _session: &Vec<u32>, layer: usize) -> Result<Matrix> {
        Ok(self.visual[&layer].clone())
    }
    fn fork(&self, session: &Vec<u32>) -> Result<Vec<u32>> {
        Ok(session.clone())
    }
}

pub fn identity(n: usize) -> Unembedding {
    let mut m = Matrix::zeros(n, n);
    for i in 0..n {
        m.row_mut(i)[i] = 1.0;
    }
    Unembedding::new(m).unwrap()
}

/// Per-step revised (or raw) logits computed from the uncached full pass,
/// independent of the decoder's incremental bookkeeping.
pub fn oracle_step_logits(
    model: &ToyModel,
    visual: &VisualInput,
    prompt: &[u32],
    generated: &[u32],
    saver: Option<&SaverParams>,
) -> Vec<f32> {
    let n = model.dims().n_layers;
    let p = model.dims().n_visual;
    let full = model.forward_full(visual, prompt, generated).unwrap();
    let pos = p + prompt.len() + generated.len() - 1;
    let z = project_hidden(full[n].row(pos), model.unembedding()).unwrap();
    let Some(s) = saver else { return z };
    let layers = s.layers.resolve(n).unwrap();
    let mut vis = BTreeMap::new();
    for &l in &layers {
        let rows: Vec<Vec<f32>> = (0..p).map(|r| full[l].row(r).to_vec()).collect();
        vis.insert(l, Matrix::from_rows(&rows).unwrap());
    }
    let table = build_sas_table(&vis, model.unembedding(), &layers, n).unwrap();
    let c = filter_candidates(&z, s.top_k, s.top_p).unwrap();
    let choice = select_layer(&table, &c, s.n_image_tokens).unwrap();
    let early = project_hidden(full[choice.layer].row(pos), model.unembedding()).unwrap();
    revise_logits(&z, &early, &c, s.alpha, choice.gamma).unwrap()
}

/// Sum of per-step log-softmax scores of `seq` under the oracle.
pub fn oracle_score(model: &ToyModel, visual: &VisualInput, prompt: &[u32], seq: &[u32], saver: Option<&SaverParams>) -> f64 {
    (0..seq.len())
        .map(|t| {
            let z = oracle_step_logits(model, visual, prompt, &seq[..t], saver);
            log_softmax(&z).unwrap()[seq[t] as usize]
        })
        .sum()
}
pub mod metric_oracles;
