//! Chain checkpoints.
//!
//! Layout (JSON object):
//!
//! | key         | content                                        |
//! |-------------|------------------------------------------------|
//! | `format`    | `"glshrink-checkpoint"`                        |
//! | `version`   | `1`                                            |
//! | `tag`       | model variant                                  |
//! | `settings`  | sampler settings                               |
//! | `stream_id` | stream of the chain                            |
//! | `iteration` | sweeps completed                               |
//! | `frozen`    | whether local variances are pinned             |
//! | `state`     | full chain state, auxiliaries included         |
//! | `rng`       | seed, stream and ChaCha word position          |
//! | `panel`     | the data the chain runs on                     |
//! | `draws`     | draws kept so far                              |
//!
//! Floats are written with round-trip precision, so a resumed chain is
//! bit-identical to an uninterrupted one.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ChainDraws, ChainRunner};
use crate::distributions::{RngSnapshot, RngStream};
use crate::model::{ChainState, ModelTag, SamplerSettings, SourcePanel};
use crate::{Error, Result};

const FORMAT: &str = "glshrink-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub tag: ModelTag,
    pub settings: SamplerSettings,
    pub stream_id: u64,
    pub iteration: usize,
    pub frozen: bool,
    pub state: ChainState,
    pub rng: RngSnapshot,
    pub panel: SourcePanel,
    pub draws: ChainDraws,
}

impl Checkpoint {
    pub(super) fn capture(r: &ChainRunner) -> Self {
        Self {
            format: FORMAT.to_string(),
            version: VERSION,
            tag: r.tag,
            settings: r.settings.clone(),
            stream_id: r.stream_id,
            iteration: r.iteration,
            frozen: r.freeze_local,
            state: r.state.clone(),
            rng: r.rng.snapshot(),
            panel: r.panel.clone(),
            draws: r.draws.clone(),
        }
    }

    pub(super) fn into_runner(self) -> Result<ChainRunner> {
        if self.format != FORMAT || self.version != VERSION {
            return Err(Error::Config(format!(
                "not a version {VERSION} checkpoint (format {:?}, version {})",
                self.format, self.version
            )));
        }
        if self.rng.stream_id != self.stream_id || self.rng.seed != self.settings.seed {
            return Err(Error::Config("checkpoint rng does not match its settings".into()));
        }
        Ok(ChainRunner {
            panel: self.panel,
            tag: self.tag,
            settings: self.settings,
            stream_id: self.stream_id,
            freeze_local: self.frozen,
            state: self.state,
            rng: RngStream::restore(&self.rng)?,
            iteration: self.iteration,
            draws: self.draws,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Resumes a chain from a checkpoint file and runs it to completion.
pub fn resume(path: &Path) -> Result<ChainDraws> {
    ChainRunner::from_checkpoint(Checkpoint::load(path)?)?.run()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Monitor;

    #[test]
    fn resumed_chain_is_bit_identical() {
        let y = vec![0.21, 0.25, 0.30, 0.27, 0.15, 0.22];
        let v = vec![4e-4, 1e-4, 9e-4, 2e-4, 6e-4, 1e-4];
        let panel = SourcePanel::unlabeled(3, 2, y, &v).unwrap();
        let settings = SamplerSettings {
            n_iter: 400,
            n_burnin: 100,
            n_chains: 1,
            thin: 1,
            seed: 77,
            overdispersion: 0.0,
            monitor: Monitor::all(),
            scan: Default::default(),
        };
        for tag in [ModelTag::M11b, ModelTag::M1a] {
            let full = ChainRunner::new(&panel, tag, &settings, 4).unwrap().run().unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("chain.json");
            for stop in [50, 250] {
                let mut r = ChainRunner::new(&panel, tag, &settings, 4).unwrap();
                r.run_until(stop).unwrap();
                r.save_checkpoint(&path).unwrap();
                drop(r);
                assert_eq!(resume(&path).unwrap(), full, "{tag} stop {stop}");
            }
        }
    }
}
