#pragma once

// Training: AdamW with linear warmup + cosine decay, the teacher-in-the-loop
// distillation loop, retrieval evaluation, bit-exact checkpointing, and the
// ablation harness.
//
// Determinism contract: with a single-threaded loader every random draw is
// taken from a stream derived from (seed, purpose, step/epoch), never from a
// serially consumed generator, so a run resumed from a checkpoint at step k
// reproduces the uninterrupted run's metrics rows k+1.. byte for byte.

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "picoclip/analysis.hpp"
#include "picoclip/data.hpp"
#include "picoclip/encoders.hpp"
#include "picoclip/losses.hpp"

namespace picoclip {

struct TrainConfig {
    std::uint64_t seed = 0;
    std::size_t epochs = 20;
    std::size_t batch_size = 64;
    double lr_peak = 1e-3;
    double weight_decay = 0.1;
    std::size_t warmup_steps = 200;
    std::string lr_decay = "cosine";  // cosine | constant

    double lambda1 = 4000.0, lambda2 = 1.0, lambda3 = 1.0, lambda4 = 0.1;

    std::string manifest;        // training dataset directory
    std::string eval_manifest;   // held-out dataset directory
    std::string teacher_checkpoint;
    std::string out_dir = "runs/default";

    std::string block_kind = "sasp";
    std::string sharing = "adjacent_pairs";
    std::string freeze = "inherited_frozen";
    bool use_kd = true;
    bool use_pm = true;
    bool use_wi = true;
    bool ic_include_positive = false;
    std::string pm_fusion = "hadamard";
    std::size_t eval_every = 0;  // steps; 0 = final evaluation only
    std::size_t checkpoint_every = 0;

    // model geometry
    std::size_t image_size = 32;
    std::size_t d = 32;
    std::size_t heads = 4;
    std::size_t n_blocks_img = 2;
    std::size_t n_blocks_txt = 2;
    std::size_t embed_dim = 64;
    std::size_t max_len = 16;

    bool augment = true;
    bool shaped_scale_by_model_dim = false;  // 1/sqrt(d) reading of the score scale
    bool per_head_shape = true;
    bool inherit_tau = false;
    double tau_init = 0.07;

    LossWeights loss_weights() const { return {lambda1, lambda2, lambda3, lambda4}; }
};

// JSON round-trip; unknown keys rejected so config typos fail loudly.
std::string train_config_to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const std::string& text);
TrainConfig load_train_config(const std::string& path);
void save_train_config(const TrainConfig& cfg, const std::string& path);

// Headline hyperparameters at full published scale (batch 1536, lr 0.001,
// weight decay 0.1, warmup 10000, 32 epochs, lambdas 4000/1/1/0.1). Not sized
// for a desk CPU; provided as a preset only.
void apply_paper_scale(TrainConfig& cfg);

struct AdamConfig {
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
};

struct OptimizerState {
    struct Moments {
        std::vector<float> m, v;
    };
    std::map<std::string, Moments> moments;  // trainable parameters only
    std::size_t step = 0;
    AdamConfig adam;
};

// Decoupled weight decay plus Adam moment update; frozen parameters (no
// requires_grad) are skipped entirely and carry no state.
void adamw_step(const std::vector<NamedParam>& params, OptimizerState& state, double lr, double weight_decay);

// Linear 0->peak over warmup, then cosine to 0 at total (or constant).
double lr_schedule(std::size_t step, std::size_t warmup_steps, std::size_t total_steps, double lr_peak,
                   const std::string& decay = "cosine");

// -----------------------------------------------------------------------
// checkpointing: magic "SICL", u32 version, u64 header length, JSON header
// (config, step, rng, tensor table), then raw little-endian tensor payload
// -----------------------------------------------------------------------

struct Checkpoint {
    TrainConfig config;
    std::size_t step = 0;
    std::string rng_state;
    std::vector<std::pair<std::string, Tensor<float>>> tensors;
};

void save_checkpoint(const ModelBundle& bundle, const OptimizerState* opt, const TrainConfig& cfg, std::size_t step,
                     const std::string& rng_state, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

// Rebuilds a bundle (and optimizer state when present) from a checkpoint.
struct RestoredModel {
    ModelBundle bundle;
    OptimizerState opt;
    bool has_opt = false;
    TrainConfig config;
    std::size_t step = 0;
    std::string rng_state;
};
RestoredModel restore_model(const Checkpoint& ckpt);
RestoredModel restore_model_from(const std::string& path);

ModelBundle build_student_bundle(const TrainConfig& cfg, std::size_t vocab_size, Rng& rng);

struct RetrievalResult {
    double r1_i2t = 0, r1_t2i = 0;
    double mean() const { return 0.5 * (r1_i2t + r1_t2i); }
};

// R@1 both directions over index-aligned pairs; ties resolved to the lowest
// candidate index. Uses caption 0 and no augmentation.
RetrievalResult evaluate_retrieval(const ModelBundle& bundle, const ToyDataset& eval_data);

struct TrainResult {
    RetrievalResult final_eval;
    std::vector<LossBreakdown<float>> per_step;   // logged loss rows
    std::vector<double> epoch_mean_loss;          // mean total loss per epoch
    std::string metrics_csv, eval_csv, checkpoint_path;
    std::size_t steps = 0;
};

TrainResult train_run(const TrainConfig& cfg, const std::string& resume_from = "");

// Four ablation arms (baseline / weight inheritance / +distillation / +pair
// matching) plus the single- vs multi-caption pair, each over `seeds` seeds.
struct AblationRunRow {
    std::string config;
    std::uint64_t seed = 0;
    double r1_i2t = 0, r1_t2i = 0, r1_mean = 0;
    double loss_epoch10 = 0;  // mean total loss over epoch 10
    double final_loss = 0;
};

struct AblationReport {
    std::vector<AblationRunRow> rows;
    std::map<std::string, double> mean_r1, sd_r1, mean_loss_epoch10;
};

AblationReport ablation_suite(const TrainConfig& base_cfg, const std::string& manifest_multi,
                              const std::string& manifest_single, std::size_t seeds, const std::string& out_dir);
void write_ablation_csv(const AblationReport& report, const std::string& path);

}  // namespace picoclip
