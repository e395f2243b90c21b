#include "picoclip/analysis.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>

namespace picoclip {

Tensor<float> avg_attention_matrix(const Tensor<float>& stacked, std::size_t n) {
    if (!stacked.defined() || stacked.numel() == 0) throw ValueError("avg_attention_matrix: empty input");
    if (stacked.ndim() != 2 || stacked.cols() != n || stacked.rows() % n != 0)
        throw ShapeError("avg_attention_matrix: " + format_shape(stacked.shape()) + " is not a stack of " +
                         std::to_string(n) + "x" + std::to_string(n) + " matrices");
    const std::size_t groups = stacked.rows() / n;
    Tensor<float> out = Tensor<float>::zeros({n, n});
    const float inv = 1.0f / static_cast<float>(groups);
    for (std::size_t g = 0; g < groups; ++g)
        for (std::size_t i = 0; i < n * n; ++i) out.raw()[i] += stacked.raw()[g * n * n + i] * inv;
    return out;
}

namespace {

constexpr double kProbFloor = 1e-12;

// clamp negatives, floor, renormalize; returns clipped mass
double normalize_row(const float* src, std::size_t n, std::vector<double>& dst) {
    double clipped = 0, mass = 0;
    for (std::size_t j = 0; j < n; ++j) {
        double v = static_cast<double>(src[j]);
        if (v < 0) {
            clipped += -v;
            v = 0;
        }
        dst[j] = v;
        mass += v;
    }
    if (mass <= 0) throw ValueError("js_divergence: zero-sum row after clamping");
    double total = 0;
    for (std::size_t j = 0; j < n; ++j) {
        dst[j] = std::max(dst[j], kProbFloor);
        total += dst[j];
    }
    for (std::size_t j = 0; j < n; ++j) dst[j] /= total;
    return clipped;
}

}  // namespace

JsResult js_divergence_ex(const Tensor<float>& p, const Tensor<float>& q) {
    if (p.shape() != q.shape())
        throw ShapeError("js_divergence: shapes differ, " + format_shape(p.shape()) + " vs " + format_shape(q.shape()));
    const std::size_t m = p.rows(), n = p.cols();
    std::vector<double> pr(n), qr(n);
    double js_total = 0, clip_total = 0;
    for (std::size_t i = 0; i < m; ++i) {
        clip_total += normalize_row(p.raw().data() + i * n, n, pr);
        clip_total += normalize_row(q.raw().data() + i * n, n, qr);
        double acc = 0;
        for (std::size_t j = 0; j < n; ++j) {
            const double mij = 0.5 * (pr[j] + qr[j]);
            acc += 0.5 * pr[j] * std::log(pr[j] / mij) + 0.5 * qr[j] * std::log(qr[j] / mij);
        }
        js_total += acc;
    }
    JsResult r;
    r.js = js_total / static_cast<double>(m);
    r.clipped_mass = clip_total / static_cast<double>(2 * m);
    return r;
}

double js_divergence(const Tensor<float>& p, const Tensor<float>& q) { return js_divergence_ex(p, q).js; }

std::vector<AdjacentJsEntry> adjacent_js_profile(const ModelBundle& bundle, const Tensor<float>& probe_images) {
    if (bundle.img_blocks.size() < 2) throw ValueError("adjacent_js_profile: model needs at least 2 blocks");
    EncoderTrace trace;
    encode_image(probe_images, bundle, &trace);  // no tape active: pure forward
    const std::size_t n = trace.tokens;
    std::vector<Tensor<float>> averaged;
    for (const auto& a : trace.block_attn) averaged.push_back(avg_attention_matrix(a, n));
    std::vector<AdjacentJsEntry> out;
    for (std::size_t i = 0; i + 1 < averaged.size(); ++i) {
        JsResult r = js_divergence_ex(averaged[i], averaged[i + 1]);
        out.push_back({i, r.js, r.clipped_mass});
    }
    return out;
}

void write_js_profile_csv(const std::vector<AdjacentJsEntry>& profile, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot write " + path);
    f << "pair_index,js_nats,clipped_mass\n";
    char buf[128];
    for (const auto& e : profile) {
        std::snprintf(buf, sizeof(buf), "%zu,%.9g,%.9g\n", e.pair_index, e.js_nats, e.clipped_mass);
        f << buf;
    }
}

std::vector<ParamReportRow> param_report(const ModelBundle& bundle) {
    auto module_of = [](const std::string& name) -> std::string {
        if (name.rfind("img.stem", 0) == 0 || name == "img.pos") return "img.backbone";
        if (name.rfind("img.mixers", 0) == 0 || name.rfind("img.blocks", 0) == 0) return "img.blocks";
        if (name.rfind("img.", 0) == 0) return "img.head";
        if (name == "txt.embed" || name == "txt.pos") return "txt.backbone";
        if (name.rfind("txt.mixers", 0) == 0 || name.rfind("txt.blocks", 0) == 0) return "txt.blocks";
        if (name.rfind("txt.", 0) == 0) return "txt.head";
        if (name.rfind("pm.", 0) == 0) return "pm";
        return "tau";
    };
    std::vector<ParamReportRow> rows;
    auto row_for = [&rows](const std::string& module) -> ParamReportRow& {
        for (auto& r : rows)
            if (r.module == module) return r;
        rows.push_back({module, 0, 0, 0});
        return rows.back();
    };
    for (const auto& p : bundle.named_params()) {
        ParamReportRow& r = row_for(module_of(p.name));
        const std::size_t c = p.tensor.numel();
        r.total += c;
        if (bundle.freeze.is_frozen(p.name))
            r.frozen += c;
        else
            r.trainable += c;
    }
    return rows;
}

std::size_t total_param_count(const ModelBundle& bundle) {
    std::size_t total = 0;
    for (const auto& p : bundle.named_params()) total += p.tensor.numel();
    return total;
}

void write_param_report_csv(const std::vector<ParamReportRow>& rows, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot write " + path);
    f << "module,trainable,frozen,total\n";
    std::size_t tr = 0, fr = 0, to = 0;
    for (const auto& r : rows) {
        f << r.module << "," << r.trainable << "," << r.frozen << "," << r.total << "\n";
        tr += r.trainable;
        fr += r.frozen;
        to += r.total;
    }
    f << "all," << tr << "," << fr << "," << to << "\n";
}

BenchReport throughput_bench(BlockKind kind, std::size_t d, std::size_t heads, std::size_t n, std::size_t batch,
                             std::size_t iters, std::size_t warmup, std::size_t depth) {
    if (iters < 3) throw ValueError("throughput_bench: need at least 3 timed iterations");
    if (warmup < 1) throw ValueError("throughput_bench: need at least 1 warmup iteration");
    Rng rng(1234);
    std::vector<SASPBlockParams<float>> sasp;
    std::vector<PreLNBlockParams<float>> preln;
    for (std::size_t i = 0; i < depth; ++i) {
        if (kind == BlockKind::sasp) {
            sasp.push_back(make_sasp_block<float>(d, heads, rng));
            // bench off-init weights, not the pristine zero matrices
            for (auto& v : sasp.back().mixer->w_q.raw()) v = static_cast<float>(rng.normal() * 0.05);
            for (auto& v : sasp.back().mlp.w2.raw()) v = static_cast<float>(rng.normal() * 0.05);
        } else {
            preln.push_back(make_preln_block<float>(d, heads, rng));
        }
    }
    Tensor<float> x = Tensor<float>::zeros({batch * n, d});
    for (auto& v : x.raw()) v = static_cast<float>(rng.normal());

    auto forward = [&] {
        Tensor<float> y = x;
        if (kind == BlockKind::sasp)
            for (const auto& blk : sasp) y = sasp_block(y, blk, batch);
        else
            for (const auto& blk : preln) y = preln_block(y, blk, batch);
        return y.raw()[0];  // keep the result alive
    };

    volatile float sink = 0;
    for (std::size_t i = 0; i < warmup; ++i) sink = sink + forward();
    std::vector<double> ms(iters);
    using clock = std::chrono::steady_clock;
    for (std::size_t i = 0; i < iters; ++i) {
        auto t0 = clock::now();
        sink = sink + forward();
        auto t1 = clock::now();
        ms[i] = std::chrono::duration<double, std::milli>(t1 - t0).count();
    }
    (void)sink;

    BenchReport r;
    r.kind = to_string(kind);
    r.d = d;
    r.heads = heads;
    r.n = n;
    r.batch = batch;
    r.depth = depth;
    r.iters = iters;
    r.warmup = warmup;
    r.all_ms = ms;
    std::vector<double> sorted = ms;
    std::sort(sorted.begin(), sorted.end());
    const double median = sorted[sorted.size() / 2];
    r.median_ms_per_forward = median;
    r.median_items_per_sec = static_cast<double>(batch) / (median / 1000.0);
    return r;
}

void write_bench_csv(const std::vector<BenchReport>& reports, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot write " + path);
    f << "kind,d,heads,n,batch,depth,iters,warmup,median_items_per_sec,median_ms_per_forward\n";
    char buf[256];
    for (const auto& r : reports) {
        std::snprintf(buf, sizeof(buf), "%s,%zu,%zu,%zu,%zu,%zu,%zu,%zu,%.6g,%.6g\n", r.kind.c_str(), r.d, r.heads,
                      r.n, r.batch, r.depth, r.iters, r.warmup, r.median_items_per_sec, r.median_ms_per_forward);
        f << buf;
    }
}

}  // namespace picoclip
