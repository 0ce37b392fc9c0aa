use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::lm::{Adam, AdamConfig, CosineSchedule, LanguageModel, Vocabulary};
use crate::lm_finetune::instances::{make_instances, pack, text_instances, FTInstance, Mode};
use crate::lm_finetune::mixture::{MixtureSampler, MixtureSource, MixtureSpec, SourceKind};
use crate::lm_finetune::FTExample;
use crate::retriever::RetrievalContext;

/// Instances of one mixture source, grouped by the example they came from.
#[derive(Debug, Clone)]
pub struct InstancePool {
    pub source: MixtureSource,
    pub examples: Vec<Vec<FTInstance>>,
}

impl InstancePool {
    pub fn new(name: impl Into<String>, kind: SourceKind, examples: Vec<Vec<FTInstance>>) -> Self {
        let examples: Vec<Vec<FTInstance>> = examples.into_iter().filter(|e| !e.is_empty()).collect();
        Self {
            source: MixtureSource {
                name: name.into(),
                kind,
                size: examples.len(),
            },
            examples,
        }
    }

    pub fn num_instances(&self) -> usize {
        self.examples.iter().map(Vec::len).sum()
    }

    /// Instances of task examples; the instance rng is seeded from `seed`.
    #[allow(clippy::too_many_arguments)]
    pub fn from_tasks(
        name: impl Into<String>,
        kind: SourceKind,
        examples: &[FTExample],
        vocab: &Vocabulary,
        retrieval: Option<&RetrievalContext>,
        k_tilde: usize,
        mode: Mode,
        window: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let groups = examples
            .iter()
            .enumerate()
            .map(|(i, e)| make_instances(e, i, vocab, retrieval, k_tilde, mode, window, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::new(name, kind, groups))
    }

    /// Plain-text instances, one example per line.
    pub fn from_lines(name: impl Into<String>, lines: &[String], vocab: &Vocabulary, window: usize) -> Result<Self> {
        let groups = lines
            .iter()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, l)| text_instances(vocab, l, i, window))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::new(name, SourceKind::Unsupervised, groups))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    /// Instances drawn per optimizer step.
    pub batch_size: usize,
    pub peak_lr: f64,
    pub end_lr: f64,
    pub warmup: usize,
    /// Held-out evaluation period; 0 disables evaluation.
    pub eval_every: usize,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 16,
            peak_lr: 3e-3,
            end_lr: 3e-4,
            warmup: 50,
            eval_every: 0,
            seed: 0,
            adam: AdamConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    /// Mean output-token loss of every step.
    pub losses: Vec<f64>,
    /// `(step, held-out score)`, higher is better.
    pub evals: Vec<(usize, f64)>,
    /// Step of the returned parameters.
    pub best_step: usize,
}

impl TrainLog {
    /// Mean loss over the last `n` steps.
    pub fn recent_loss(&self, n: usize) -> f64 {
        let tail = &self.losses[self.losses.len().saturating_sub(n)..];
        tail.iter().sum::<f64>() / tail.len().max(1) as f64
    }
}

pub type Evaluator<'a> = dyn FnMut(&LanguageModel) -> Result<f64> + 'a;

/// Trains on packed batches drawn from the source mixture. Each draw picks an
/// example, then one of its instances uniformly. With an evaluator the
/// parameters with the best held-out score are returned (the earliest on
/// ties); otherwise the final ones.
pub fn train(
    mut model: LanguageModel,
    pools: &[InstancePool],
    spec: &MixtureSpec,
    config: &TrainConfig,
    mut eval: Option<&mut Evaluator>,
) -> Result<(LanguageModel, TrainLog)> {
    let mut log = TrainLog::default();
    if config.steps == 0 {
        return Ok((model, log));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let sources: Vec<MixtureSource> = pools.iter().map(|p| p.source.clone()).collect();
    let mut sampler = MixtureSampler::new(&sources, spec, config.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut opt = Adam::new(model.net.num_params(), config.adam);
    let schedule = CosineSchedule {
        peak: config.peak_lr,
        end: config.end_lr,
        warmup: config.warmup,
        total: config.steps,
    };
    let window = model.window();
    let mut best: Option<(f64, usize, Vec<f32>)> = None;
    for step in 0..config.steps {
        let drawn: Vec<&FTInstance> = (0..config.batch_size)
            .map(|_| {
                let (s, e) = sampler.next().expect("endless sampler");
                let group = &pools[s].examples[e];
                &group[rng.gen_range(0..group.len())]
            })
            .collect();
        let batch = pack(&drawn, window, &mut rng)?;
        let loss = model.train_step(&batch, &mut opt, schedule.lr(step))?;
        log.losses.push(loss);
        let done = step + 1;
        if let Some(eval) = eval.as_deref_mut() {
            if config.eval_every > 0 && (done % config.eval_every == 0 || done == config.steps) {
                let score = eval(&model)?;
                log.evals.push((done, score));
                if best.as_ref().map_or(true, |b| score > b.0) {
                    best = Some((score, done, model.net.params.clone()));
                }
            }
        }
    }
    log.best_step = config.steps;
    if let Some((_, step, params)) = best {
        log.best_step = step;
        model.net.params = params;
    }
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::{ModelConfig, Vocabulary};
    use crate::lm_finetune::instances::Background;
    use crate::lm_finetune::SourceKind;

    fn model() -> LanguageModel {
        let vocab = Vocabulary::build(["a b c d e f"], 50);
        let config = ModelConfig {
            vocab_size: 0,
            window: 16,
            width: 16,
            layers: 1,
            heads: 2,
            ffn: 32,
        };
        LanguageModel::new(vocab, config, 1).unwrap()
    }

    fn pool() -> InstancePool {
        let inst = FTInstance {
            example: 0,
            background: Background::None,
            ids: vec![5, 6, 7, 8],
            labels: vec![false, false, true, true],
        };
        InstancePool::new("one", SourceKind::Task, vec![vec![inst]])
    }

    #[test]
    fn zero_steps_is_a_no_op() {
        let m = model();
        let cfg = TrainConfig {
            steps: 0,
            ..Default::default()
        };
        let (out, log) = train(m.clone(), &[pool()], &MixtureSpec::default(), &cfg, None).unwrap();
        assert_eq!(out.net.params, m.net.params);
        assert!(log.losses.is_empty());
    }

    #[test]
    fn keeps_the_best_evaluated_parameters() {
        let cfg = TrainConfig {
            steps: 6,
            batch_size: 2,
            eval_every: 2,
            ..Default::default()
        };
        let mut snapshots = Vec::new();
        let scores = [0.2, 0.9, 0.5];
        let mut calls = 0;
        let mut eval = |m: &LanguageModel| {
            snapshots.push(m.net.params.clone());
            calls += 1;
            Ok(scores[calls - 1])
        };
        let (out, log) = train(model(), &[pool()], &MixtureSpec::default(), &cfg, Some(&mut eval)).unwrap();
        assert_eq!(log.best_step, 4);
        assert_eq!(log.evals.iter().map(|e| e.0).collect::<Vec<_>>(), vec![2, 4, 6]);
        assert_eq!(out.net.params, snapshots[1]);
    }
}
