#pragma once

// Toy image and text encoders with projection heads, plus the weight
// inheritance / freezing half of distillation-based training.
//
// Image tower: conv stem (two stride-2 stages by default, standing in for the
// inherited convolutional backbone), learned position embedding, a stack of
// Pre-LN or SAS-P blocks, final layer norm, mean pooling, linear projection,
// l2 normalization. Text tower mirrors it with a token embedding and
// mean-over-non-pad pooling.
//
// The teacher is the same structure built with Pre-LN blocks and fully
// frozen; the student inherits stem/embeddings/projections by name and
// freezes them, leaving blocks, temperature and pair-matching heads trainable.

#include <cstdint>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include "picoclip/blocks.hpp"
#include "picoclip/losses.hpp"
#include "picoclip/tensor.hpp"

namespace picoclip {

struct StemStage {
    std::size_t out_channels = 0;
    std::size_t stride = 2;
    std::size_t kernel = 3;
};

struct ImageEncoderConfig {
    std::size_t image_size = 32;
    std::vector<StemStage> stem;  // empty selects the default {3->16 s2, 16->d s2}
    std::size_t n_blocks = 2;
    BlockKind block_kind = BlockKind::sasp;
    std::size_t d = 32;
    std::size_t heads = 4;
    std::size_t embed_dim = 64;
};

struct TextEncoderConfig {
    std::size_t vocab_size = 0;
    std::size_t max_len = 16;
    std::size_t d = 32;
    std::size_t n_blocks = 2;
    BlockKind block_kind = BlockKind::sasp;
    std::size_t heads = 4;
    std::size_t embed_dim = 64;
};

// Per-parameter trainable/frozen split. Frozen tensors carry
// requires_grad=false (no update, no wasted backward work below them) but
// gradients still propagate through the ops that consume them.
struct FreezeMask {
    std::set<std::string> frozen;
    bool is_frozen(const std::string& name) const { return frozen.count(name) != 0; }
};

enum class FreezePolicy { inherited_frozen, all_trainable };
FreezePolicy freeze_policy_from_string(const std::string& s);
std::string to_string(FreezePolicy p);

struct NamedParam {
    std::string name;
    Tensor<float> tensor;
};

struct ConvStage {
    Tensor<float> w;  // (in_ch*k*k) x out_ch
    Tensor<float> b;  // out_ch
    std::size_t in_ch = 0, out_ch = 0, kernel = 3, stride = 2, pad = 1;
};

struct BlockStack {
    BlockKind kind = BlockKind::sasp;
    std::vector<SASPBlockParams<float>> sasp;
    std::vector<PreLNBlockParams<float>> preln;
    std::vector<std::shared_ptr<ShapedMixerParams<float>>> mixer_groups;  // one entry per share group
    SharedMixerRegistry registry;
    std::size_t size() const { return kind == BlockKind::sasp ? sasp.size() : preln.size(); }
};

struct ModelBundle {
    ImageEncoderConfig img_cfg;
    TextEncoderConfig txt_cfg;
    SharePolicy sharing = SharePolicy::adjacent_pairs;

    std::vector<ConvStage> stem;
    Tensor<float> img_pos;  // tokens x d
    BlockStack img_blocks;
    Tensor<float> img_final_gain, img_final_bias;
    Tensor<float> img_proj;  // d x embed_dim

    Tensor<float> tok_embed;  // vocab x d
    Tensor<float> txt_pos;    // max_len x d
    BlockStack txt_blocks;
    Tensor<float> txt_final_gain, txt_final_bias;
    Tensor<float> txt_proj;

    Tensor<float> log_tau;  // temperature stored as log parameter
    PMHeads<float> pm;

    FreezeMask freeze;
    bool scale_by_model_dim = false;  // 1/sqrt(d) instead of 1/sqrt(dh) in shaped attention
    bool per_head_shape = true;

    std::size_t image_tokens() const;
    Tensor<float> tau() const { return exp_elem(log_tau); }
    float tau_value() const { return std::exp(log_tau.raw()[0]); }

    // Every parameter exactly once; shared mixers appear once per group.
    std::vector<NamedParam> named_params() const;
};

struct BundleConfig {
    ImageEncoderConfig img;
    TextEncoderConfig txt;
    SharePolicy sharing = SharePolicy::adjacent_pairs;
    PMFusion pm_fusion = PMFusion::hadamard;
    bool per_head_shape = true;
    bool scale_by_model_dim = false;
    float tau_init = 0.07f;
};

ModelBundle make_model_bundle(const BundleConfig& cfg, Rng& rng);

struct EncoderTrace {
    // per block: detached shaped/softmax attention stacked (B*H*n) x n
    std::vector<Tensor<float>> block_attn;
    std::size_t batch = 0, tokens = 0, heads = 0;
};

// images: B x 3 x S x S with values in [0,1]; rows of the result are
// unit-norm embeddings.
Tensor<float> encode_image(const Tensor<float>& images, const ModelBundle& bundle, EncoderTrace* trace = nullptr);

// tokens: B*L ids, pad id 0; pooling is the mean over non-pad positions.
Tensor<float> encode_text(const std::vector<std::int32_t>& tokens, std::size_t batch, std::size_t len,
                          const ModelBundle& bundle, EncoderTrace* trace = nullptr);

// Name pairs student<-teacher covering stem, embeddings, position tables,
// final norms and projections (never the blocks).
std::vector<std::pair<std::string, std::string>> default_inherit_mapping(const ModelBundle& student,
                                                                         bool include_tau = false);

// Copies mapped teacher tensors into the student. Validates every pair before
// touching anything; on error the student is untouched.
void inherit_weights(ModelBundle& student, const ModelBundle& teacher,
                     const std::vector<std::pair<std::string, std::string>>& mapping);

FreezeMask apply_freeze(ModelBundle& bundle, FreezePolicy policy);

}  // namespace picoclip
