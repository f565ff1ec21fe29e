//! Denoiser and prompt construction per replicate.

use std::fs;
use std::path::Path;

use anyhow::Context;
use psd_core::corpus::{make_eval_suite, Corpus};
use psd_core::denoiser::{CountModel, FrontierOracle, FrontierOracleConfig};
use psd_core::{Denoiser, TokenId, Vocabulary};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{DenoiserSection, FrontierSection, RunConfig};

/// Seed-independent state shared by all replicates.
pub enum Prepared {
    Frontier,
    Count { corpus: Box<Corpus>, model: Box<CountModel> },
}

pub enum Model<'a> {
    Frontier(FrontierOracle),
    Count(&'a CountModel),
}

impl Model<'_> {
    pub fn denoiser(&self) -> &dyn Denoiser {
        match self {
            Model::Frontier(o) => o,
            Model::Count(m) => *m,
        }
    }
}

pub struct Instance<'a> {
    pub model: Model<'a>,
    pub prompt: Vec<TokenId>,
}

/// Train the count model once; frontier oracles are built per replicate.
pub fn prepare(cfg: &RunConfig) -> anyhow::Result<Prepared> {
    match &cfg.denoiser {
        DenoiserSection::Frontier(_) => Ok(Prepared::Frontier),
        DenoiserSection::Count(c) => {
            let path = cfg.resolve(&c.corpus);
            let corpus = Corpus::from_file(&path, c.corpus_options)?;
            let eos = corpus.vocab().eos_id();
            let docs: Vec<Vec<TokenId>> = corpus
                .documents()
                .iter()
                .map(|d| {
                    let mut d = d.clone();
                    if c.append_eos {
                        d.push(eos);
                    }
                    d
                })
                .collect();
            let model = CountModel::train(c.model, corpus.vocab().clone(), &docs)
                .with_context(|| format!("training count model on {}", path.display()))?;
            log::info!(
                "count model: {} documents, vocabulary of {}",
                docs.len(),
                corpus.vocab().size()
            );
            Ok(Prepared::Count {
                corpus: Box::new(corpus),
                model: Box::new(model),
            })
        }
    }
}

impl Prepared {
    pub fn instance(&self, cfg: &RunConfig, seed: u64) -> anyhow::Result<Instance<'_>> {
        match (self, &cfg.denoiser) {
            (Prepared::Frontier, DenoiserSection::Frontier(f)) => {
                let reference = f.reference.clone().unwrap_or_else(|| draw_reference(cfg, f, seed));
                let prompt = reference[..cfg.prompt_len].to_vec();
                let vocab = Vocabulary::new(f.vocab_size, f.eos())?;
                let oracle = FrontierOracle::new(
                    FrontierOracleConfig {
                        reference,
                        c_max: f.c_max,
                        decay: f.decay,
                        noise_scale: f.noise_scale,
                        correctness: f.correctness,
                        floor: f.floor,
                        seed,
                        drift: f.drift,
                    },
                    vocab,
                )?;
                Ok(Instance {
                    model: Model::Frontier(oracle),
                    prompt,
                })
            }
            (Prepared::Count { corpus, model }, DenoiserSection::Count(_)) => {
                let pair = make_eval_suite(corpus, 1, cfg.prompt_len, seed)?
                    .pop()
                    .expect("suite of one");
                Ok(Instance {
                    model: Model::Count(model),
                    prompt: pair.prompt,
                })
            }
            _ => anyhow::bail!("prepared state does not match the denoiser section"),
        }
    }

    /// Vocabulary table and model artifact, for count runs.
    pub fn write_artifacts(&self, dir: &Path) -> anyhow::Result<()> {
        if let Prepared::Count { corpus, model } = self {
            fs::write(dir.join("vocab.tsv"), corpus.lexicon().to_table())?;
            let mut buf = Vec::new();
            model.save(&mut buf)?;
            fs::write(dir.join("count_model.json"), buf)?;
        }
        Ok(())
    }
}

/// Uniform non-eos tokens from the replicate seed.
fn draw_reference(cfg: &RunConfig, f: &FrontierSection, seed: u64) -> Vec<TokenId> {
    let len = f
        .reference_len
        .unwrap_or(cfg.prompt_len + cfg.engine.max_new_tokens);
    let eos = f.eos();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len)
        .map(|_| {
            let t = rng.gen_range(0..f.vocab_size - 1);
            if t >= eos {
                t + 1
            } else {
                t
            }
        })
        .collect()
}
