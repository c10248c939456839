//! Dense tensors, elementary losses and the finite-difference oracle.

mod gradcheck;
mod io;
mod ops;
mod tensor;

pub use gradcheck::{finite_difference_check, finite_difference_check_floored};
pub use io::{read_tensor, read_tensor_from, write_tensor, write_tensor_to, TENSOR_MAGIC};
pub use ops::{
    cosine_similarity, dice_bce_loss, dice_score, dot, kl_divergence, l2_norm, log_softmax,
    mse_loss, mse_loss_grad, normalize, normalize_backward, sigmoid, softmax, token_nll,
    token_nll_logits, DICE_SMOOTH, PROB_FLOOR,
};
pub use tensor::{LossWithGrad, Tensor, VoxelMask, VoxelVolume};
