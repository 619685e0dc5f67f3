// SPDX-License-Identifier: MIT OR Apache-2.0

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::forward::{DecodeState, StepRecord, TraceSpec};
use super::ops::softmax;
use super::{ModelBundle, TokenSequence};
use crate::error::{Result, SpectroError};
use crate::instrument::HookPlan;

/// Nucleus sampling parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingParams {
    pub top_p: f64,
    /// `<= 0` selects greedy argmax decoding.
    pub temperature: f64,
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self { top_p: 0.9, temperature: 0.6 }
    }
}

impl SamplingParams {
    pub fn greedy() -> Self {
        Self { top_p: 1.0, temperature: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(SpectroError::InvalidArgument(format!("top_p must be in (0, 1], got {}", self.top_p)));
        }
        if !self.temperature.is_finite() {
            return Err(SpectroError::InvalidArgument("temperature must be finite".into()));
        }
        Ok(())
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Draws the next token id. Ties in probability keep the lower id first.
pub fn sample_next(logits: &[f64], params: &SamplingParams, rng: &mut impl Rng) -> usize {
    if params.temperature <= 0.0 {
        return argmax(logits);
    }
    let scaled: Vec<f64> = logits.iter().map(|z| z / params.temperature).collect();
    let probs = softmax(&scaled);
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));

    let mut cum = 0.0;
    let mut cut = order.len();
    for (i, &id) in order.iter().enumerate() {
        cum += probs[id];
        if cum >= params.top_p {
            cut = i + 1;
            break;
        }
    }
    let nucleus = &order[..cut];
    let mass: f64 = nucleus.iter().map(|&id| probs[id]).sum();
    let mut u = rng.random::<f64>() * mass;
    for &id in nucleus {
        u -= probs[id];
        if u < 0.0 {
            return id;
        }
    }
    nucleus[nucleus.len() - 1]
}

/// Incremental decoder over a key/value cache.
///
/// Hooks act per position exactly as in a full forward pass; swap entries
/// are rejected because they need a paired run.
#[derive(Debug, Clone)]
pub struct Decoder<'a> {
    state: DecodeState<'a>,
    plan: Option<&'a HookPlan>,
    bos_prepended: bool,
}

impl<'a> Decoder<'a> {
    pub fn new(bundle: &'a ModelBundle, plan: Option<&'a HookPlan>, bos_prepended: bool) -> Result<Self> {
        if let Some(plan) = plan {
            plan.validate(&bundle.config)?;
            if plan.has_swap() {
                return Err(SpectroError::InvalidArgument(
                    "swap hooks need a paired run and cannot drive generation".into(),
                ));
            }
        }
        Ok(Self { state: DecodeState::new(bundle), plan, bos_prepended })
    }

    pub fn position(&self) -> usize {
        self.state.position()
    }

    /// Feeds one token; returns its logits row and whether any residual
    /// went non-finite.
    pub fn step(&mut self, token: usize) -> Result<(Vec<f64>, bool)> {
        let is_bos = self.bos_prepended && self.position() == 0;
        let mut rec = StepRecord::default();
        let logits = self.state.step(token, is_bos, self.plan, &TraceSpec::none(), &mut rec)?;
        let diverged = rec.diverged_at.is_some() || !logits.iter().all(|x| x.is_finite());
        Ok((logits, diverged))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Generation {
    /// Prompt followed by the generated tokens.
    pub sequence: TokenSequence,
    pub prompt_len: usize,
    /// Decoding stopped early on non-finite activations.
    pub diverged: bool,
}

impl Generation {
    pub fn continuation(&self) -> &[usize] {
        &self.sequence.ids[self.prompt_len..]
    }
}

/// Samples up to `max_new_tokens` continuation tokens.
pub fn generate(
    bundle: &ModelBundle,
    prompt: &TokenSequence,
    params: &SamplingParams,
    seed: u64,
    max_new_tokens: usize,
    plan: Option<&HookPlan>,
) -> Result<Generation> {
    prompt.validate(&bundle.config)?;
    params.validate()?;
    let mut decoder = Decoder::new(bundle, plan, prompt.bos_prepended)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids = prompt.ids.clone();
    let budget = bundle.config.max_seq_len.saturating_sub(ids.len());

    let mut last = Vec::new();
    for &id in &prompt.ids {
        let (logits, diverged) = decoder.step(id)?;
        if diverged {
            return Ok(Generation {
                sequence: TokenSequence::new(ids, prompt.bos_prepended),
                prompt_len: prompt.len(),
                diverged: true,
            });
        }
        last = logits;
    }
    let mut diverged = false;
    for i in 0..max_new_tokens.min(budget) {
        let next = sample_next(&last, params, &mut rng);
        ids.push(next);
        if i + 1 == max_new_tokens.min(budget) {
            break;
        }
        let (logits, div) = decoder.step(next)?;
        if div {
            diverged = true;
            break;
        }
        last = logits;
    }
    Ok(Generation { sequence: TokenSequence::new(ids, prompt.bos_prepended), prompt_len: prompt.len(), diverged })
}
