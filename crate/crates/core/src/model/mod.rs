//! End-to-end enhancement network: weighted layer sum, fusion, projection,
//! attention blocks and a sigmoid mask head, plus the loss, training loop,
//! inference path and checkpoint format.

mod checkpoint;
mod config;
mod infer;
mod loss;
mod net;
mod train;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use config::{parse_kv, Ablation, MagCompression, ModelConfig};
pub use infer::{enhance, Enhanced};
pub use loss::{example_loss, loss, si_snr_soft, Example, LossVars, SI_SNR_SOFT_EPS};
pub use net::{ForwardVars, Model, IDENTITY_MASK_BIAS};
pub use train::{accumulate_batch, stream_seed, LogRow, TrainData, Trainer, Utterance};
