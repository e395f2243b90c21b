#pragma once

// Measurement tools: averaged attention maps and the Jensen-Shannon
// divergence between adjacent blocks (the weight-sharing signal), exact
// parameter accounting, and a forward-pass throughput benchmark.

#include <cstdint>
#include <string>
#include <vector>

#include "picoclip/encoders.hpp"
#include "picoclip/tensor.hpp"

namespace picoclip {

// Arithmetic mean over the head (and optionally batch) axis of attention
// matrices stacked as (groups*n) x n.
Tensor<float> avg_attention_matrix(const Tensor<float>& stacked, std::size_t n);

struct JsResult {
    double js = 0;            // mean over rows, natural log, in [0, ln 2]
    double clipped_mass = 0;  // mean negative mass removed per row before renormalization
};

// Rows are clamped at zero (shaped attention can dip negative), floored at
// 1e-12 and renormalized before the divergence is taken.
JsResult js_divergence_ex(const Tensor<float>& p, const Tensor<float>& q);
double js_divergence(const Tensor<float>& p, const Tensor<float>& q);

struct AdjacentJsEntry {
    std::size_t pair_index = 0;  // pair (i, i+1)
    double js_nats = 0;
    double clipped_mass = 0;
};

// Runs the probe batch through the image tower, averages each block's
// attention over heads and batch, and reports the JS divergence of every
// adjacent pair.
std::vector<AdjacentJsEntry> adjacent_js_profile(const ModelBundle& bundle, const Tensor<float>& probe_images);
void write_js_profile_csv(const std::vector<AdjacentJsEntry>& profile, const std::string& path);

struct ParamReportRow {
    std::string module;
    std::size_t trainable = 0, frozen = 0, total = 0;
};

// Exact counts grouped by top-level module; shared tensors counted once.
std::vector<ParamReportRow> param_report(const ModelBundle& bundle);
std::size_t total_param_count(const ModelBundle& bundle);
void write_param_report_csv(const std::vector<ParamReportRow>& rows, const std::string& path);

struct BenchReport {
    std::string kind;
    std::size_t d = 0, heads = 0, n = 0, batch = 0, depth = 0;
    std::size_t iters = 0, warmup = 0;
    double median_items_per_sec = 0;
    double median_ms_per_forward = 0;
    std::vector<double> all_ms;  // per-iteration wall clock, warmup excluded
};

// Forward-only block-stack benchmark on fixed random input; median over
// iterations from a monotonic clock.
BenchReport throughput_bench(BlockKind kind, std::size_t d, std::size_t heads, std::size_t n, std::size_t batch,
                             std::size_t iters, std::size_t warmup, std::size_t depth = 2);
void write_bench_csv(const std::vector<BenchReport>& reports, const std::string& path);

}  // namespace picoclip
