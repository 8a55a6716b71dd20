//! The segmentor together with the optional knowledge learner, sharing one
//! parameter store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{constant_like, Var};
use crate::bfser::{Bfser, SegOutput, AUX_CHANNELS};
use crate::ckler::{translate, Ckler, Translation};
use crate::config::{AuxSource, Mode, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::{Ctx, Init, ParamStore};

/// Name prefix of every knowledge-learner parameter.
pub const CKLER_PREFIX: &str = "ckler.";

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub bfser: Bfser,
    pub ckler: Option<Ckler>,
}

#[derive(Clone, Debug)]
pub struct Prediction<'t> {
    pub seg: SegOutput<'t>,
    pub translation: Option<Translation<'t>>,
    /// The auxiliary image actually fed to the segmentor.
    pub aux: Option<Var<'t>>,
}

impl Model {
    /// The segmentor is initialized from `seed`'s first stream and the
    /// knowledge learner from a second one, so enabling the learner leaves
    /// the segmentor's initial weights unchanged.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bfser = Bfser::new(&mut Init::new(&mut store, &mut rng, ""), config)?;
        let ckler = if config.enable_ckler {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(1);
            Some(Ckler::new(&mut Init::new(&mut store, &mut rng, ""), config))
        } else {
            None
        };
        Ok(Self {
            config: config.clone(),
            store,
            bfser,
            ckler,
        })
    }

    /// Runs the segmentor with the auxiliary input chosen by `source`. A
    /// missing auxiliary image is synthesized when the knowledge learner is
    /// available.
    pub fn forward<'t>(
        &self,
        ctx: &Ctx<'t>,
        x_i: Var<'t>,
        x_u: Option<Var<'t>>,
        source: AuxSource,
    ) -> Result<Prediction<'t>> {
        let dual = self.config.mode == Mode::Dual;
        let wants_pseudo = dual && (source == AuxSource::Pseudo || (source == AuxSource::Real && x_u.is_none()));
        let translation = match &self.ckler {
            Some(c) if wants_pseudo || self.config.enable_injection => Some(translate(ctx, x_i, c)?),
            _ => None,
        };
        let aux = if !dual {
            None
        } else {
            Some(match (source, x_u, translation) {
                (AuxSource::Real, Some(u), _) => u,
                (AuxSource::Zero, _, _) => {
                    let (b, _, h, w) = x_i.dims4()?;
                    constant_like(ctx.tape(), &[b, AUX_CHANNELS, h, w], 0.0)
                }
                (_, _, Some(t)) => t.x_u,
                (AuxSource::Pseudo, _, None) => {
                    return Err(Error::Config("pseudo auxiliary input requires the knowledge learner".into()))
                }
                (AuxSource::Real, None, None) => {
                    return Err(Error::MissingModality(
                        "dual mode without an auxiliary image needs the knowledge learner".into(),
                    ))
                }
            })
        };
        let z = if self.config.enable_injection {
            translation.map(|t| t.z)
        } else {
            None
        };
        let seg = self.bfser.forward(ctx, x_i, aux, z)?;
        Ok(Prediction { seg, translation, aux })
    }

    /// Forward pass of the knowledge learner alone.
    pub fn translate<'t>(&self, ctx: &Ctx<'t>, x_i: Var<'t>) -> Result<Translation<'t>> {
        let c = self
            .ckler
            .as_ref()
            .ok_or_else(|| Error::Config("model has no knowledge learner".into()))?;
        translate(ctx, x_i, c)
    }
}
