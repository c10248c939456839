//! Sentence → evidence → anatomy grounding: multi-positive contrastive
//! alignment and an evidence-conditioned mask decoder.

mod contrastive;
mod decoder;
mod train;

pub use contrastive::{
    evidence_cosines, ground_sentence, infonce_from_cosines, kappa, multi_positive_infonce,
    multi_positive_infonce_prefixed, GroundingBatch,
};
pub use decoder::{decode_mask, patchify, unpatchify, DecoderConfig, DecoderTrace, SegDecoder};
pub use train::{
    evidence_tokens, grounding_batch, mask_examples, mask_loss, train_mask_decoder, train_sea, EpochLoss,
    MaskExample, SeaConfig, SeaModel,
};
