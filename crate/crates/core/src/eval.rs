//! Zero-shot classification and retrieval@1 on held-out world samples.

use serde::{Deserialize, Serialize};

use crate::encoders::{argmax_similarity, Embedder};
use crate::error::{Error, Result};
use crate::world::{Sample, Split, World};

/// Retrieval pairs are drawn from the eval split starting at this index, so
/// they never overlap the zero-shot samples.
pub const RETRIEVAL_OFFSET: u64 = 1 << 30;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub zero_shot_samples: usize,
    pub retrieval_pairs: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            zero_shot_samples: 2048,
            retrieval_pairs: 512,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub zeroshot_acc: f64,
    pub retrieval_t2i_at1: f64,
    pub retrieval_i2t_at1: f64,
    pub steps_seen: usize,
    pub samples_seen: usize,
    pub wall_clock_per_step: f64,
}

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("zeroshot_acc", self.zeroshot_acc),
            ("retrieval_t2i_at1", self.retrieval_t2i_at1),
            ("retrieval_i2t_at1", self.retrieval_i2t_at1),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Precondition(format!("{name} = {v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Held-out samples, drawn once and reused across evaluations.
#[derive(Clone, Debug)]
pub struct EvalSet {
    zero_shot: Vec<Sample>,
    retrieval: Vec<Sample>,
    prompts: Vec<Vec<f64>>,
}

impl EvalSet {
    pub fn new(world: &World, settings: EvalSettings) -> Result<Self> {
        Ok(Self {
            zero_shot: world.draw_samples(Split::Eval, settings.zero_shot_samples)?,
            retrieval: world.draw_range(Split::Eval, RETRIEVAL_OFFSET, settings.retrieval_pairs)?,
            prompts: world.zero_shot_prompts(),
        })
    }

    pub fn zero_shot_accuracy<E: Embedder + ?Sized>(&self, model: &E) -> Result<f64> {
        let prompts = self
            .prompts
            .iter()
            .map(|p| model.embed_text(p))
            .collect::<Result<Vec<_>>>()?;
        let mut correct = 0usize;
        for s in &self.zero_shot {
            if argmax_similarity(&model.embed_image(&s.image)?, &prompts) == s.class_id {
                correct += 1;
            }
        }
        Ok(correct as f64 / self.zero_shot.len() as f64)
    }

    /// `(text→image, image→text)` recall@1 against each pair's own partner.
    pub fn retrieval<E: Embedder + ?Sized>(&self, model: &E) -> Result<(f64, f64)> {
        let imgs = self
            .retrieval
            .iter()
            .map(|s| model.embed_image(&s.image))
            .collect::<Result<Vec<_>>>()?;
        let txts = self
            .retrieval
            .iter()
            .map(|s| model.embed_text(&s.caption.iter().map(|&v| v as f64).collect::<Vec<_>>()))
            .collect::<Result<Vec<_>>>()?;
        let n = imgs.len() as f64;
        let t2i = txts.iter().enumerate().filter(|(i, t)| argmax_similarity(t, &imgs) == *i).count();
        let i2t = imgs.iter().enumerate().filter(|(i, m)| argmax_similarity(m, &txts) == *i).count();
        Ok((t2i as f64 / n, i2t as f64 / n))
    }

    pub fn evaluate<E: Embedder + ?Sized>(&self, model: &E) -> Result<EvalReport> {
        let zeroshot_acc = self.zero_shot_accuracy(model)?;
        let (retrieval_t2i_at1, retrieval_i2t_at1) = self.retrieval(model)?;
        Ok(EvalReport {
            zeroshot_acc,
            retrieval_t2i_at1,
            retrieval_i2t_at1,
            steps_seen: 0,
            samples_seen: 0,
            wall_clock_per_step: 0.0,
        })
    }
}

/// Zero-shot accuracy and retrieval of any embedder; step counters are left at zero.
pub fn evaluate<E: Embedder + ?Sized>(model: &E, world: &World, settings: EvalSettings) -> Result<EvalReport> {
    EvalSet::new(world, settings)?.evaluate(model)
}
