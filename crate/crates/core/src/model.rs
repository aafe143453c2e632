//! The assembled classifier: feature network, capsule head and reconstructor.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{Tape, Var};
use crate::capsule::{classify, CapsuleOutput, CapsuleParams, CapsuleVars};
use crate::config::ModelConfig;
use crate::data::{to_batch, BeatRecord, LabelVocabulary};
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::params::{Bound, ParamStore};
use crate::ssm::{encode, EncoderParams};
use crate::tensor::Tensor;
use crate::training::recon::{capsule_mask, decode, ReconstructorParams};

const EVAL_CHUNK: usize = 64;

#[derive(Clone, Debug)]
pub struct MambaCapsule {
    pub config: ModelConfig,
    pub vocabulary: LabelVocabulary,
    pub store: ParamStore,
    pub encoder: EncoderParams,
    pub capsule: CapsuleParams,
    pub recon: ReconstructorParams,
}

impl MambaCapsule {
    pub fn new(config: ModelConfig, vocabulary: LabelVocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        if vocabulary.len() != config.n_classes {
            return Err(Error::Config(format!(
                "vocabulary has {} classes but n_classes = {}",
                vocabulary.len(),
                config.n_classes
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = EncoderParams::init(&mut store, &config, &mut rng)?;
        let capsule = CapsuleParams::init(&mut store, &config, &mut rng);
        let recon = ReconstructorParams::init(&mut store, &config, &mut rng);
        Ok(Self {
            config,
            vocabulary,
            store,
            encoder,
            capsule,
            recon,
        })
    }

    /// Records encoder + capsule head for `x: [B, L]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, mode: Mode<'_>) -> Result<CapsuleVars> {
        let features = encode(tape, p, &self.encoder, x, mode)?;
        classify(tape, p, &self.capsule, features)
    }

    /// Class capsules for `x: [B, L]` in evaluation mode.
    pub fn infer(&self, x: &Tensor) -> Result<CapsuleOutput> {
        let mut tape = Tape::new();
        let p = self.store.bind_frozen(&mut tape);
        let xv = tape.constant(x.clone());
        let caps = self.forward(&mut tape, &p, xv, Mode::Eval)?;
        Ok(CapsuleOutput::from_tape(&tape, caps))
    }

    /// Capsules for many beats, evaluated in parallel chunks.
    pub fn infer_records(&self, records: &[BeatRecord]) -> Result<CapsuleOutput> {
        if records.is_empty() {
            return Err(Error::Shape("no records to evaluate".into()));
        }
        let parts = records
            .par_chunks(EVAL_CHUNK)
            .map(|chunk| {
                let refs: Vec<&BeatRecord> = chunk.iter().collect();
                self.infer(&to_batch(&refs)?)
            })
            .collect::<Result<Vec<_>>>()?;
        let (k, dc) = (self.config.n_classes, self.config.class_dim);
        let mut caps = Vec::with_capacity(records.len() * k * dc);
        let mut norms = Vec::with_capacity(records.len() * k);
        for part in parts {
            caps.extend_from_slice(part.capsules.data());
            norms.extend_from_slice(part.norms.data());
        }
        Ok(CapsuleOutput {
            capsules: Tensor::new([records.len(), k, dc], caps)?,
            norms: Tensor::new([records.len(), k], norms)?,
        })
    }

    pub fn predict(&self, records: &[BeatRecord]) -> Result<Vec<usize>> {
        Ok(self.infer_records(records)?.predictions())
    }

    /// Decodes capsules `[B, K, Dc]` that are already masked.
    pub fn decode_masked(&self, masked: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.store.bind_frozen(&mut tape);
        let m = tape.constant(masked.clone());
        let out = decode(&mut tape, &p, &self.recon, m)?;
        Ok(tape.value(out).clone())
    }

    /// Reconstruction from the capsule of class `choose[b]` in each row.
    pub fn reconstruct(&self, capsules: &Tensor, choose: &[usize]) -> Result<Tensor> {
        let mask = capsule_mask(choose, self.config.n_classes)?;
        let (k, dc) = (self.config.n_classes, self.config.class_dim);
        if capsules.shape() != [choose.len(), k, dc] {
            return Err(Error::dim("reconstruct", capsules.shape(), &[choose.len(), k, dc]));
        }
        let mut masked = capsules.clone();
        for (row, m) in masked.data_mut().chunks_mut(dc).zip(mask.data()) {
            row.iter_mut().for_each(|v| *v *= m);
        }
        self.decode_masked(&masked)
    }
}
