#pragma once

// Transformer blocks: the conventional Pre-LN block and the simplified
// parallel block (SAS-P) whose token mixer is shaped attention
//   A = alpha*I + beta*softmax(X Wq (X Wk)^T / sqrt(dh)) - gamma*C,
// C being the n x n matrix with every entry 1/n. At initialization Wq = 0 and
// alpha = beta = gamma = 1, which makes A exactly the identity, so a fresh
// block passes signal through untouched without any residual connection.
// The mixer has no value or output projection; each head's A multiplies the
// head's own slice of the input and head outputs are concatenated.

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "picoclip/tensor.hpp"

namespace picoclip {

enum class BlockKind { preln, sasp };
enum class SharePolicy { adjacent_pairs, all, none };

BlockKind block_kind_from_string(const std::string& s);
std::string to_string(BlockKind k);
SharePolicy share_policy_from_string(const std::string& s);
std::string to_string(SharePolicy p);

// n x n matrix with implicit value 1/n in every entry.
struct CenterMatrix {
    std::size_t n = 0;
    template <typename T>
    Tensor<T> materialize() const {
        return Tensor<T>::full({n, n}, T(1) / T(n));
    }
};

template <typename T>
struct ShapedMixerParams {
    std::size_t d = 0, heads = 0;  // dh = d / heads
    Tensor<T> w_q, w_k;            // d x d each
    Tensor<T> alpha, beta, gamma;  // one scalar per head (or a single shared scalar)

    std::size_t dh() const { return d / heads; }
    std::size_t param_count() const;
};

// Paper-style init: Wq = 0, alpha = beta = gamma = 1, Wk random normal.
template <typename T>
ShapedMixerParams<T> make_shaped_mixer(std::size_t d, std::size_t heads, Rng& rng, bool per_head_shape = true);

template <typename T>
struct MlpParams {
    Tensor<T> w1, b1;  // d x 4d, 4d
    Tensor<T> w2, b2;  // 4d x d, d
};

template <typename T>
struct SASPBlockParams {
    std::shared_ptr<ShapedMixerParams<T>> mixer;  // possibly shared with a sibling block
    Tensor<T> ln_gain, ln_bias;
    MlpParams<T> mlp;
    T ln_eps = T(1e-5);
};

template <typename T>
struct PreLNBlockParams {
    Tensor<T> w_q, w_k, w_v, w_o;          // d x d each
    Tensor<T> b_q, b_k, b_v, b_o;          // optional (undefined when bias disabled)
    Tensor<T> ln1_gain, ln1_bias, ln2_gain, ln2_bias;
    MlpParams<T> mlp;
    std::size_t heads = 0;
    bool attn_bias = false;
    T ln_eps = T(1e-5);
};

// New SAS-P block: paper mixer init plus zero-initialized second MLP matrix,
// so the whole block is an exact layer_norm pass-through at init.
template <typename T>
SASPBlockParams<T> make_sasp_block(std::size_t d, std::size_t heads, Rng& rng,
                                   std::shared_ptr<ShapedMixerParams<T>> mixer = nullptr,
                                   bool per_head_shape = true);
template <typename T>
PreLNBlockParams<T> make_preln_block(std::size_t d, std::size_t heads, Rng& rng, bool attn_bias = false);

// Maps block index -> share group so adjacent blocks can resolve to the same
// mixer storage. adjacent_pairs groups (0,1), (2,3), ...; a trailing odd block
// gets its own group.
struct SharedMixerRegistry {
    std::vector<std::size_t> assignment;  // block index -> group id
    std::size_t group_count = 0;
};

SharedMixerRegistry share_mixers(std::size_t n_blocks, SharePolicy policy);

// Fused shaping step over softmax output stacked as (B*H*n) x n.
// alpha/beta/gamma hold one scalar per head, or a single scalar applied to
// every head.
template <typename T>
Tensor<T> shape_attention_rows(const Tensor<T>& sm, const Tensor<T>& alpha, const Tensor<T>& beta,
                               const Tensor<T>& gamma, std::size_t batch, std::size_t n);

template <typename T>
struct ShapedAttentionResult {
    Tensor<T> y;     // (B*n) x d
    Tensor<T> attn;  // detached (B*H*n) x n shaped attention values; defined only when captured
};

// Batched shaped attention over B sequences of n tokens stacked in one
// (B*n) x d matrix. `scale_by_model_dim` selects 1/sqrt(d) instead of the
// per-head 1/sqrt(dh).
template <typename T>
ShapedAttentionResult<T> shaped_attention_batch(const Tensor<T>& x, const ShapedMixerParams<T>& p, std::size_t batch,
                                                bool capture_attn = false, bool scale_by_model_dim = false);

// Single-sequence form: returns Y plus the per-head attention stack H x n x n.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> shaped_attention(const Tensor<T>& x, const ShapedMixerParams<T>& p,
                                                 bool scale_by_model_dim = false);

template <typename T>
Tensor<T> sasp_block(const Tensor<T>& x, const SASPBlockParams<T>& p, std::size_t batch = 1,
                     bool scale_by_model_dim = false);
template <typename T>
ShapedAttentionResult<T> sasp_block_traced(const Tensor<T>& x, const SASPBlockParams<T>& p, std::size_t batch,
                                           bool capture_attn, bool scale_by_model_dim = false);

template <typename T>
Tensor<T> preln_block(const Tensor<T>& x, const PreLNBlockParams<T>& p, std::size_t batch = 1);
template <typename T>
ShapedAttentionResult<T> preln_block_traced(const Tensor<T>& x, const PreLNBlockParams<T>& p, std::size_t batch,
                                            bool capture_attn);

// Exact per-block parameter counts. The mixer is the part that differs:
// Pre-LN carries Q,K,V,O projections (4d^2, plus 4d with biases), the shaped
// mixer carries Q,K and three per-head scalars (2d^2 + 3H). MLP and norm
// counts are identical across kinds.
std::size_t count_mixer_params(BlockKind kind, std::size_t d, std::size_t heads, bool attn_bias = false);
std::size_t count_block_params(BlockKind kind, std::size_t d, std::size_t heads, bool attn_bias = false);
// Total mixer parameters for a stack of L blocks under a sharing policy.
std::size_t count_stack_mixer_params(BlockKind kind, std::size_t d, std::size_t heads, std::size_t n_blocks,
                                     SharePolicy policy, bool attn_bias = false);

}  // namespace picoclip
