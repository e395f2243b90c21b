// Command-line entry point: dataset generation, teacher/student training,
// retrieval evaluation, attention-divergence profiling, throughput
// benchmarking and the ablation harness.

#include <cstdio>
#include <filesystem>
#include <iostream>

#include "CLI11.hpp"

#include "picoclip/analysis.hpp"
#include "picoclip/data.hpp"
#include "picoclip/train.hpp"

namespace fs = std::filesystem;
using namespace picoclip;

namespace {

void add_config_options(CLI::App* cmd, std::string& config_path, bool& paper_scale) {
    cmd->add_option("--config", config_path, "JSON config with TrainConfig fields");
    cmd->add_flag("--paper-scale", paper_scale,
                  "apply the published-scale hyperparameters (batch 1536, lr 0.001, wd 0.1, warmup 10000, "
                  "epochs 32, lambdas 4000/1/1/0.1); not sized for a desk CPU");
}

TrainConfig resolve_config(const std::string& config_path, bool paper_scale) {
    TrainConfig cfg;
    if (!config_path.empty()) cfg = load_train_config(config_path);
    if (paper_scale) apply_paper_scale(cfg);
    return cfg;
}

int cmd_gen_data(std::size_t n, std::size_t m, std::uint64_t seed, const std::string& out) {
    Manifest man = gen_toy_dataset(n, m, seed, out);
    std::uintmax_t image_bytes = 0;
    for (const auto& s : man.samples) image_bytes += fs::file_size(fs::path(out) / s.image_path);
    const std::uintmax_t manifest_bytes = fs::file_size(fs::path(out) / "manifest.jsonl");
    std::printf("wrote %zu samples x %zu captions to %s\n", man.samples.size(), m + 1, out.c_str());
    std::printf("image bytes: %ju, manifest bytes: %ju (%.2f%% of total)\n", image_bytes, manifest_bytes,
                100.0 * static_cast<double>(manifest_bytes) / static_cast<double>(image_bytes + manifest_bytes));
    return 0;
}

std::uint64_t fnv1a(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    std::uint64_t h = 1469598103934665603ull;
    char c;
    while (f.get(c)) h = (h ^ static_cast<unsigned char>(c)) * 1099511628211ull;
    return h;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"desk-scale contrastive image-text pretraining lab"};
    app.require_subcommand(1);

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "generate a toy image-caption dataset");
    std::size_t gen_n = 2000, gen_m = 3;
    std::uint64_t gen_seed = 7;
    std::string gen_out = "data/train";
    gen->add_option("--n", gen_n, "number of samples");
    gen->add_option("--m", gen_m, "synthetic captions per image (0..5)");
    gen->add_option("--seed", gen_seed, "generator seed");
    gen->add_option("--out", gen_out, "output directory")->required();

    // train-teacher
    auto* teach = app.add_subcommand("train-teacher", "pretrain the frozen reference model (Pre-LN, contrastive only)");
    std::string teach_config, teach_data, teach_eval, teach_out = "runs/teacher";
    bool teach_paper = false;
    std::size_t teach_epochs = 50;
    std::uint64_t teach_seed = 1;
    add_config_options(teach, teach_config, teach_paper);
    teach->add_option("--data", teach_data, "training dataset directory")->required();
    teach->add_option("--eval", teach_eval, "eval dataset directory");
    teach->add_option("--out", teach_out, "run output directory");
    teach->add_option("--epochs", teach_epochs, "training epochs");
    teach->add_option("--seed", teach_seed, "seed");

    // train
    auto* train = app.add_subcommand("train", "train the student");
    std::string train_config, train_resume, train_dump;
    bool train_paper = false;
    add_config_options(train, train_config, train_paper);
    train->add_option("--resume", train_resume, "checkpoint to resume from");
    train->add_option("--dump-config", train_dump, "write the effective config to a file and exit");

    // eval
    auto* ev = app.add_subcommand("eval", "retrieval R@1 for a checkpoint");
    std::string ev_ckpt, ev_data;
    ev->add_option("--checkpoint", ev_ckpt)->required();
    ev->add_option("--data", ev_data, "eval dataset directory")->required();

    // analyze-js
    auto* js = app.add_subcommand("analyze-js", "adjacent-block attention divergence profile");
    std::string js_ckpt, js_data, js_out = "js_profile.csv";
    std::size_t js_probe = 64;
    std::uint64_t js_seed = 99;
    js->add_option("--checkpoint", js_ckpt)->required();
    js->add_option("--data", js_data, "probe dataset directory")->required();
    js->add_option("--out", js_out, "output CSV");
    js->add_option("--probe", js_probe, "probe batch size");
    js->add_option("--seed", js_seed, "probe sampling seed");

    // bench
    auto* bench = app.add_subcommand("bench", "forward throughput of block stacks");
    std::string bench_kind = "both", bench_out = "bench.csv";
    std::size_t bench_d = 256, bench_heads = 8, bench_n = 64, bench_b = 8, bench_iters = 20, bench_warmup = 3,
                bench_depth = 2;
    bench->add_option("--kind", bench_kind, "sasp|preln|both");
    bench->add_option("--d", bench_d);
    bench->add_option("--heads", bench_heads);
    bench->add_option("--n", bench_n, "tokens per sequence");
    bench->add_option("--batch", bench_b);
    bench->add_option("--iters", bench_iters);
    bench->add_option("--warmup", bench_warmup);
    bench->add_option("--depth", bench_depth, "blocks per stack");
    bench->add_option("--out", bench_out, "output CSV");

    // ablate
    auto* abl = app.add_subcommand("ablate", "run the ablation grid");
    std::string abl_config, abl_m3, abl_m0, abl_out = "runs/ablation";
    bool abl_paper = false;
    std::size_t abl_seeds = 3;
    add_config_options(abl, abl_config, abl_paper);
    abl->add_option("--data-multi", abl_m3, "multi-caption dataset directory")->required();
    abl->add_option("--data-single", abl_m0, "single-caption dataset directory")->required();
    abl->add_option("--seeds", abl_seeds, "seeds per configuration");
    abl->add_option("--out", abl_out, "output directory");

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) return cmd_gen_data(gen_n, gen_m, gen_seed, gen_out);

        if (teach->parsed()) {
            TrainConfig cfg = resolve_config(teach_config, teach_paper);
            cfg.block_kind = "preln";
            cfg.use_kd = false;
            cfg.use_pm = false;
            cfg.use_wi = false;
            cfg.freeze = "all_trainable";
            cfg.manifest = teach_data;
            cfg.eval_manifest = teach_eval;
            cfg.out_dir = teach_out;
            cfg.epochs = teach_epochs;
            cfg.seed = teach_seed;
            TrainResult r = train_run(cfg);
            std::printf("teacher trained: %zu steps, R@1 i2t=%.4f t2i=%.4f\n", r.steps, r.final_eval.r1_i2t,
                        r.final_eval.r1_t2i);
            std::printf("checkpoint %s (fnv1a %016llx)\n", r.checkpoint_path.c_str(),
                        static_cast<unsigned long long>(fnv1a(r.checkpoint_path)));
            return 0;
        }

        if (train->parsed()) {
            TrainConfig cfg = resolve_config(train_config, train_paper);
            if (!train_dump.empty()) {
                save_train_config(cfg, train_dump);
                std::printf("config written to %s\n", train_dump.c_str());
                return 0;
            }
            TrainResult r = train_run(cfg, train_resume);
            std::printf("trained %zu steps, final R@1 i2t=%.4f t2i=%.4f\n", r.steps, r.final_eval.r1_i2t,
                        r.final_eval.r1_t2i);
            std::printf("metrics: %s\ncheckpoint: %s\n", r.metrics_csv.c_str(), r.checkpoint_path.c_str());
            return 0;
        }

        if (ev->parsed()) {
            RestoredModel m = restore_model_from(ev_ckpt);
            ToyDataset data = ToyDataset::open(ev_data, m.config.image_size, m.config.max_len);
            RetrievalResult r = evaluate_retrieval(m.bundle, data);
            std::printf("R@1 i2t=%.4f t2i=%.4f (n=%zu)\n", r.r1_i2t, r.r1_t2i, data.size());
            return 0;
        }

        if (js->parsed()) {
            RestoredModel m = restore_model_from(js_ckpt);
            ToyDataset data = ToyDataset::open(js_data, m.config.image_size, m.config.max_len);
            Rng rng(js_seed);
            std::vector<std::size_t> idx;
            for (std::size_t i = 0; i < std::min(js_probe, data.size()); ++i) idx.push_back(rng.uniform_index(data.size()));
            AugmentPolicy no_aug;
            no_aug.enabled = false;
            auto batch = data.make_batch(idx, no_aug, 0, 0);
            auto profile = adjacent_js_profile(m.bundle, batch.images);
            write_js_profile_csv(profile, js_out);
            for (const auto& e : profile)
                std::printf("pair %zu: js=%.6f nats (clipped %.3g)\n", e.pair_index, e.js_nats, e.clipped_mass);

            auto params = param_report(m.bundle);
            write_param_report_csv(params, (fs::path(js_out).parent_path() / "params.csv").string());
            return 0;
        }

        if (bench->parsed()) {
            std::vector<BenchReport> reports;
            if (bench_kind == "sasp" || bench_kind == "both")
                reports.push_back(throughput_bench(BlockKind::sasp, bench_d, bench_heads, bench_n, bench_b,
                                                   bench_iters, bench_warmup, bench_depth));
            if (bench_kind == "preln" || bench_kind == "both")
                reports.push_back(throughput_bench(BlockKind::preln, bench_d, bench_heads, bench_n, bench_b,
                                                   bench_iters, bench_warmup, bench_depth));
            if (reports.empty()) throw ValueError("bench: unknown kind '" + bench_kind + "'");
            write_bench_csv(reports, bench_out);
            for (const auto& r : reports)
                std::printf("%-6s d=%zu n=%zu B=%zu depth=%zu: %.1f items/sec (median %.3f ms)\n", r.kind.c_str(),
                            r.d, r.n, r.batch, r.depth, r.median_items_per_sec, r.median_ms_per_forward);
            return 0;
        }

        if (abl->parsed()) {
            TrainConfig cfg = resolve_config(abl_config, abl_paper);
            if (cfg.teacher_checkpoint.empty())
                throw ValueError("ablate: config must set teacher_checkpoint");
            AblationReport rep = ablation_suite(cfg, abl_m3, abl_m0, abl_seeds, abl_out);
            std::printf("%-12s %-10s %-10s %-12s\n", "config", "mean_r1", "sd_r1", "loss_ep10");
            for (const auto& [name, mean] : rep.mean_r1)
                std::printf("%-12s %-10.4f %-10.4f %-12.4f\n", name.c_str(), mean, rep.sd_r1[name],
                            rep.mean_loss_epoch10[name]);
            std::printf("(cap_multi rows reuse the baseline runs: identical config, deterministic loop)\n");
            return 0;
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
