#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>

#include "picoclip/train.hpp"
#include "test_util.hpp"

namespace fs = std::filesystem;
using namespace picoclip;
using testutil::random_unit_rows;

namespace {

std::string tmp_dir(const std::string& tag) {
    auto p = fs::temp_directory_path() / ("picoclip_train_" + tag);
    fs::remove_all(p);
    fs::create_directories(p);
    return p.string();
}

std::string slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

// one shared tiny corpus + teacher for the training tests
struct Fixture {
    std::string train_dir, eval_dir, teacher_ckpt;
    TrainConfig base;

    Fixture() {
        train_dir = tmp_dir("fixture_train");
        eval_dir = tmp_dir("fixture_eval");
        gen_toy_dataset(64, 3, 21, train_dir);
        gen_toy_dataset(16, 3, 9001, eval_dir);

        base.seed = 3;
        base.epochs = 2;
        base.batch_size = 16;
        base.warmup_steps = 2;
        base.lr_peak = 2e-3;
        base.manifest = train_dir;
        base.eval_manifest = eval_dir;
        base.d = 16;
        base.heads = 4;
        base.n_blocks_img = 2;
        base.n_blocks_txt = 2;
        base.embed_dim = 32;
        base.max_len = 16;

        TrainConfig tcfg = base;
        tcfg.block_kind = "preln";
        tcfg.use_kd = tcfg.use_pm = tcfg.use_wi = false;
        tcfg.freeze = "all_trainable";
        tcfg.epochs = 2;
        tcfg.out_dir = tmp_dir("fixture_teacher");
        TrainResult r = train_run(tcfg);
        teacher_ckpt = r.checkpoint_path;
    }
};

Fixture& fixture() {
    static Fixture f;
    return f;
}

}  // namespace

TEST_CASE("adamw: decay-only step, first-step magnitude, scalar reference") {
    // zero grad, one step: w <- w * (1 - lr * wd) exactly
    auto w = Tensor<float>::from_values({2}, {1.0f, -2.0f}, true);
    std::vector<NamedParam> params = {{"w", w}};
    OptimizerState st;
    adamw_step(params, st, 0.1, 0.5);
    CHECK(w.raw()[0] == doctest::Approx(1.0 * (1 - 0.1 * 0.5)).epsilon(1e-7));
    CHECK(w.raw()[1] == doctest::Approx(-2.0 * (1 - 0.1 * 0.5)).epsilon(1e-7));

    // wd=0, constant grad: first-step |delta| is lr * g / (|g| + eps) ~ lr
    auto w2 = Tensor<float>::from_values({1}, {0.0f}, true);
    w2.ensure_grad();
    w2.grad()[0] = 0.37f;
    std::vector<NamedParam> p2 = {{"w", w2}};
    OptimizerState st2;
    adamw_step(p2, st2, 1e-3, 0.0);
    CHECK(std::abs(w2.raw()[0]) == doctest::Approx(1e-3).epsilon(1e-4));

    // 100 random steps against a scalar reference implementation
    Rng rng(5);
    auto w3 = Tensor<float>::from_values({1}, {0.5f}, true);
    std::vector<NamedParam> p3 = {{"w", w3}};
    OptimizerState st3;
    double ref_w = 0.5, ref_m = 0, ref_v = 0;
    const double b1 = st3.adam.beta1, b2 = st3.adam.beta2, eps = st3.adam.eps, lr = 3e-3, wd = 0.05;
    for (int t = 1; t <= 100; ++t) {
        const double g = rng.uniform(-1, 1);
        w3.zero_grad();
        w3.ensure_grad();
        w3.grad()[0] = static_cast<float>(g);
        adamw_step(p3, st3, lr, wd);
        ref_m = b1 * ref_m + (1 - b1) * g;
        ref_v = b2 * ref_v + (1 - b2) * g * g;
        const double mhat = ref_m / (1 - std::pow(b1, t));
        const double vhat = ref_v / (1 - std::pow(b2, t));
        ref_w = ref_w * (1 - lr * wd) - lr * mhat / (std::sqrt(vhat) + eps);
        // f32 storage rounds each step; compare at f32-appropriate tolerance
        CHECK(w3.raw()[0] == doctest::Approx(ref_w).epsilon(1e-5));
    }

    // frozen parameters: untouched and carry no state
    auto wf = Tensor<float>::from_values({1}, {1.0f}, false);
    std::vector<NamedParam> pf = {{"wf", wf}};
    OptimizerState stf;
    adamw_step(pf, stf, 0.1, 0.9);
    CHECK(wf.raw()[0] == 1.0f);
    CHECK(stf.moments.empty());
}

TEST_CASE("lr schedule") {
    CHECK(lr_schedule(0, 200, 1000, 1e-3) == 0.0);
    CHECK(lr_schedule(200, 200, 1000, 1e-3) == doctest::Approx(1e-3));          // peak at warmup end
    CHECK(lr_schedule(600, 200, 1000, 1e-3) == doctest::Approx(5e-4));          // cosine midpoint
    CHECK(lr_schedule(1000, 200, 1000, 1e-3) == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(lr_schedule(199, 200, 1000, 1e-3) == doctest::Approx(1e-3 * 199.0 / 200.0));
    // continuity at the junction
    CHECK(std::abs(lr_schedule(200, 200, 1000, 1e-3) - lr_schedule(201, 200, 1000, 1e-3)) < 1e-8);
    CHECK(lr_schedule(700, 200, 1000, 1e-3, "constant") == doctest::Approx(1e-3));
    CHECK_THROWS_AS(lr_schedule(5, 200, 100, 1e-3), ValueError);
    CHECK(lr_schedule(10000, 10000, 20000, 0.001) == doctest::Approx(0.001));  // published-scale warmup end
}

TEST_CASE("paper-scale preset pins the published hyperparameters") {
    TrainConfig cfg;
    apply_paper_scale(cfg);
    CHECK(cfg.batch_size == 1536);
    CHECK(cfg.lr_peak == 0.001);
    CHECK(cfg.weight_decay == 0.1);
    CHECK(cfg.warmup_steps == 10000);
    CHECK(cfg.epochs == 32);
    CHECK(cfg.lambda1 == 4000.0);
    CHECK(cfg.lambda2 == 1.0);
    CHECK(cfg.lambda3 == 1.0);
    CHECK(cfg.lambda4 == 0.1);
}

TEST_CASE("config json round trip rejects unknown keys") {
    TrainConfig cfg;
    cfg.manifest = "x";
    cfg.lambda1 = 123.5;
    auto text = train_config_to_json(cfg);
    TrainConfig back = train_config_from_json(text);
    CHECK(train_config_to_json(back) == text);
    CHECK_THROWS_AS(train_config_from_json("{\"lr_peek\": 1.0}"), ValueError);
    CHECK_THROWS_AS(train_config_from_json("{\"batch_size\": 1}"), ValueError);
}

TEST_CASE("evaluate_retrieval on synthetic embeddings") {
    // perfect retrieval when matched pairs coincide and others are orthogonal
    const std::size_t n = 8;
    auto v = Tensor<float>::identity(n);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < n; ++j)
            if (v(i, j) > v(i, best)) best = j;
        if (best == i) ++hits;
    }
    CHECK(hits == n);

    // chance level: random unit embeddings, N=100, ~1% over 50 trials
    Rng rng(31);
    double mean_r1 = 0;
    const int trials = 50;
    for (int t = 0; t < trials; ++t) {
        auto a = random_unit_rows<float>(100, 16, rng);
        auto b = random_unit_rows<float>(100, 16, rng);
        auto sims = matmul(a, transpose(b));
        std::size_t hit = 0;
        for (std::size_t i = 0; i < 100; ++i) {
            std::size_t best = 0;
            for (std::size_t j = 1; j < 100; ++j)
                if (sims(i, j) > sims(i, best)) best = j;
            if (best == i) ++hit;
        }
        mean_r1 += hit / 100.0;
    }
    mean_r1 /= trials;
    CHECK(mean_r1 == doctest::Approx(0.01).epsilon(1.0));  // 0.01 +- 0.01
    CHECK(std::abs(mean_r1 - 0.01) < 0.01);
}

TEST_CASE("train_run: contract, determinism, degenerate lambdas") {
    auto& fx = fixture();

    TrainConfig cfg = fx.base;
    cfg.use_kd = cfg.use_pm = cfg.use_wi = false;
    cfg.freeze = "all_trainable";
    cfg.epochs = 3;  // 64/16 = 4 steps per epoch -> 12 steps
    cfg.out_dir = tmp_dir("run_a");
    TrainResult r = train_run(cfg);
    CHECK(r.steps == 12);
    CHECK(r.per_step.size() == 12);
    for (const auto& p : r.per_step) CHECK(std::isfinite(p.total));

    // CSV has exactly one header + 12 step rows
    const std::string metrics = slurp(r.metrics_csv);
    CHECK(std::count(metrics.begin(), metrics.end(), '\n') == 13);

    // same seed: byte-identical CSVs
    TrainConfig cfg2 = cfg;
    cfg2.out_dir = tmp_dir("run_b");
    TrainResult r2 = train_run(cfg2);
    CHECK(slurp(r2.metrics_csv) == metrics);
    CHECK(slurp(r2.eval_csv) == slurp(r.eval_csv));

    // total equals clip column when everything else is off
    for (const auto& p : r.per_step) {
        CHECK(p.total == doctest::Approx(p.clip).epsilon(1e-6));
        CHECK(p.fd == 0.0);
        CHECK(p.pm == 0.0);
    }
}

TEST_CASE("train_run: loss total equals component sum at every step") {
    auto& fx = fixture();
    TrainConfig cfg = fx.base;
    cfg.teacher_checkpoint = fx.teacher_ckpt;
    cfg.epochs = 1;
    cfg.out_dir = tmp_dir("run_kd");
    TrainResult r = train_run(cfg);
    REQUIRE(r.per_step.size() == 4);
    for (const auto& p : r.per_step) {
        CHECK(p.total == doctest::Approx(p.clip + p.fd + p.ic + p.crd + p.pm).epsilon(1e-5));
        CHECK(std::isfinite(p.total));
    }
}

TEST_CASE("frozen parameters are bit-stable across a training trajectory") {
    auto& fx = fixture();
    TrainConfig cfg = fx.base;
    cfg.teacher_checkpoint = fx.teacher_ckpt;
    cfg.epochs = 1;
    cfg.out_dir = tmp_dir("run_frozen");
    TrainResult r = train_run(cfg);

    RestoredModel teacher = restore_model_from(fx.teacher_ckpt);
    RestoredModel student = restore_model_from(r.checkpoint_path);
    // inherited tensors still bit-equal to the teacher's after training
    CHECK(student.bundle.stem[0].w.raw() == teacher.bundle.stem[0].w.raw());
    CHECK(student.bundle.tok_embed.raw() == teacher.bundle.tok_embed.raw());
    CHECK(student.bundle.img_proj.raw() == teacher.bundle.img_proj.raw());
    // trainable blocks moved away from their initial values
    Rng init_rng(cfg.seed);
    ToyDataset data = ToyDataset::open(fx.train_dir, 32, 16);
    ModelBundle fresh = build_student_bundle(cfg, data.vocab().size(), init_rng);
    CHECK(student.bundle.img_blocks.mixer_groups[0]->w_k.raw() != fresh.img_blocks.mixer_groups[0]->w_k.raw());
}

TEST_CASE("checkpoint: bit-exact round trip and tamper rejection") {
    auto& fx = fixture();
    Rng rng(fx.base.seed);
    ToyDataset data = ToyDataset::open(fx.train_dir, 32, 16);
    ModelBundle bundle = build_student_bundle(fx.base, data.vocab().size(), rng);
    OptimizerState opt;
    opt.step = 5;
    opt.moments["img.proj"].m.assign(bundle.img_proj.numel(), 0.25f);
    opt.moments["img.proj"].v.assign(bundle.img_proj.numel(), 0.5f);

    const std::string dir = tmp_dir("ckpt");
    const std::string p1 = dir + "/a.ckpt", p2 = dir + "/b.ckpt";
    save_checkpoint(bundle, &opt, fx.base, 5, Rng(1).save_state(), p1);

    RestoredModel back = restore_model_from(p1);
    CHECK(back.step == 5);
    CHECK(back.has_opt);
    CHECK(back.opt.step == 5);
    for (auto& p : bundle.named_params()) {
        bool found = false;
        for (auto& q : back.bundle.named_params())
            if (q.name == p.name) {
                CHECK(q.tensor.raw() == p.tensor.raw());
                found = true;
            }
        CHECK(found);
    }

    // save(load(x)) is byte-identical to x
    save_checkpoint(back.bundle, &back.opt, back.config, back.step, back.rng_state, p2);
    CHECK(slurp(p1) == slurp(p2));

    // corrupt magic
    std::string bytes = slurp(p1);
    bytes[0] = 'X';
    std::ofstream(dir + "/bad_magic.ckpt", std::ios::binary) << bytes;
    CHECK_THROWS_AS(load_checkpoint(dir + "/bad_magic.ckpt"), IoError);

    // unknown version
    bytes = slurp(p1);
    bytes[4] = 9;
    std::ofstream(dir + "/bad_ver.ckpt", std::ios::binary) << bytes;
    CHECK_THROWS_AS(load_checkpoint(dir + "/bad_ver.ckpt"), IoError);

    // truncated payload
    std::ofstream(dir + "/trunc.ckpt", std::ios::binary) << slurp(p1).substr(0, slurp(p1).size() / 2);
    CHECK_THROWS_AS(load_checkpoint(dir + "/trunc.ckpt"), IoError);
}

TEST_CASE("resume from a mid-run checkpoint reproduces the tail rows exactly") {
    auto& fx = fixture();

    TrainConfig cfg = fx.base;
    cfg.teacher_checkpoint = fx.teacher_ckpt;
    cfg.epochs = 3;  // 12 steps
    cfg.checkpoint_every = 5;
    cfg.out_dir = tmp_dir("resume_full");
    TrainResult full = train_run(cfg);
    REQUIRE(full.steps == 12);

    TrainConfig cfg2 = cfg;
    cfg2.out_dir = tmp_dir("resume_tail");
    TrainResult tail = train_run(cfg2, cfg.out_dir + "/step_000005.ckpt");
    CHECK(tail.steps == 7);

    // rows 6..12 of the full run == all rows of the resumed run
    auto lines = [](const std::string& text) {
        std::vector<std::string> out;
        std::stringstream ss(text);
        std::string line;
        while (std::getline(ss, line)) out.push_back(line);
        return out;
    };
    auto full_lines = lines(slurp(full.metrics_csv));
    auto tail_lines = lines(slurp(tail.metrics_csv));
    REQUIRE(full_lines.size() == 13);
    REQUIRE(tail_lines.size() == 8);
    CHECK(full_lines[0] == tail_lines[0]);  // header
    for (std::size_t i = 0; i < 7; ++i) CHECK(full_lines[6 + i] == tail_lines[1 + i]);

    // final model states bit-identical (checkpoint headers differ only in the
    // embedded out_dir, so compare the restored tensors)
    RestoredModel a = restore_model_from(full.checkpoint_path);
    RestoredModel b = restore_model_from(tail.checkpoint_path);
    auto pa = a.bundle.named_params(), pb = b.bundle.named_params();
    REQUIRE(pa.size() == pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) {
        CHECK(pa[i].name == pb[i].name);
        CHECK(pa[i].tensor.raw() == pb[i].tensor.raw());
    }
    for (const auto& [name, mom] : a.opt.moments) {
        CHECK(b.opt.moments.count(name) == 1);
        CHECK(b.opt.moments.at(name).m == mom.m);
        CHECK(b.opt.moments.at(name).v == mom.v);
    }
    // eval rows match too
    CHECK(slurp(full.eval_csv) == slurp(tail.eval_csv));
}

TEST_CASE("teacher embed_dim mismatch is rejected") {
    auto& fx = fixture();
    TrainConfig cfg = fx.base;
    cfg.teacher_checkpoint = fx.teacher_ckpt;
    cfg.embed_dim = 48;
    cfg.out_dir = tmp_dir("mismatch");
    CHECK_THROWS_AS(train_run(cfg), ValueError);
}
