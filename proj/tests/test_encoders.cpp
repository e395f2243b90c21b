#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "picoclip/encoders.hpp"
#include "test_util.hpp"

using namespace picoclip;
using testutil::random_tensor;

namespace {

BundleConfig tiny_config(BlockKind kind, std::size_t vocab = 50) {
    BundleConfig cfg;
    cfg.img.image_size = 32;
    cfg.img.n_blocks = 2;
    cfg.img.block_kind = kind;
    cfg.img.d = 16;
    cfg.img.heads = 4;
    cfg.img.embed_dim = 64;
    cfg.txt.vocab_size = vocab;
    cfg.txt.max_len = 12;
    cfg.txt.d = 16;
    cfg.txt.n_blocks = 2;
    cfg.txt.block_kind = kind;
    cfg.txt.heads = 4;
    cfg.txt.embed_dim = 64;
    return cfg;
}

Tensor<float> random_images(std::size_t b, std::size_t s, std::uint64_t seed) {
    Rng rng(seed);
    Tensor<float> t = Tensor<float>::zeros({b, 3, s, s});
    for (auto& v : t.raw()) v = static_cast<float>(rng.uniform01());
    return t;
}

}  // namespace

TEST_CASE("encode_image: unit rows, determinism, default shape") {
    Rng rng(1);
    auto bundle = make_model_bundle(tiny_config(BlockKind::sasp), rng);
    auto images = random_images(4, 32, 7);
    auto emb = encode_image(images, bundle);
    REQUIRE(emb.shape() == std::vector<std::size_t>{4, 64});
    for (std::size_t i = 0; i < 4; ++i) {
        double norm = 0;
        for (std::size_t j = 0; j < 64; ++j) norm += emb(i, j) * emb(i, j);
        CHECK(std::sqrt(norm) == doctest::Approx(1.0).epsilon(1e-5));
    }

    // duplicated images produce identical rows
    auto twice = Tensor<float>::zeros({2, 3, 32, 32});
    for (std::size_t i = 0; i < 3 * 32 * 32; ++i) {
        twice.raw()[i] = images.raw()[i];
        twice.raw()[3 * 32 * 32 + i] = images.raw()[i];
    }
    auto demb = encode_image(twice, bundle);
    for (std::size_t j = 0; j < 64; ++j) CHECK(demb(0, j) == demb(1, j));

    // B=1 keeps the contract
    auto one = encode_image(random_images(1, 32, 9), bundle);
    CHECK(one.shape() == std::vector<std::size_t>{1, 64});

    CHECK_THROWS_AS(encode_image(random_images(1, 16, 3), bundle), ShapeError);
}

TEST_CASE("encode_text: unit rows, pad handling, oov") {
    Rng rng(2);
    auto bundle = make_model_bundle(tiny_config(BlockKind::sasp), rng);
    std::vector<std::int32_t> tokens = {5, 9, 3, 0, 0, 0, 0, 0, 0, 0, 0, 0,
                                        8, 2, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0};
    auto emb = encode_text(tokens, 2, 12, bundle);
    REQUIRE(emb.shape() == std::vector<std::size_t>{2, 64});
    for (std::size_t i = 0; i < 2; ++i) {
        double norm = 0;
        for (std::size_t j = 0; j < 64; ++j) norm += emb(i, j) * emb(i, j);
        CHECK(std::sqrt(norm) == doctest::Approx(1.0).epsilon(1e-5));
    }

    // permuting the all-pad tail changes nothing (ids are identical zeros)
    auto shuffled = tokens;
    std::swap(shuffled[4], shuffled[10]);
    auto emb2 = encode_text(shuffled, 2, 12, bundle);
    CHECK(emb.raw() == emb2.raw());

    // single-token caption
    std::vector<std::int32_t> single(12, 0);
    single[0] = 7;
    CHECK(encode_text(single, 1, 12, bundle).shape() == std::vector<std::size_t>{1, 64});

    std::vector<std::int32_t> oov = tokens;
    oov[0] = 50;
    CHECK_THROWS_AS(encode_text(oov, 2, 12, bundle), ValueError);
}

TEST_CASE("named params enumerate every tensor exactly once") {
    Rng rng(3);
    auto bundle = make_model_bundle(tiny_config(BlockKind::sasp), rng);
    auto params = bundle.named_params();
    std::set<std::string> names;
    std::set<const void*> storages;
    for (const auto& p : params) {
        CHECK(names.insert(p.name).second);
        CHECK(storages.insert(p.tensor.node().get()).second);
    }
    // adjacent sharing over 2 blocks: one mixer group per tower
    std::size_t mixer_groups = 0;
    for (const auto& p : params)
        if (p.name.find(".mixers.") != std::string::npos && p.name.ends_with(".wq")) ++mixer_groups;
    CHECK(mixer_groups == 2);  // img + txt
}

TEST_CASE("inherit_weights: copy, empty mapping, atomic failure") {
    Rng r1(4), r2(5);
    auto student = make_model_bundle(tiny_config(BlockKind::sasp), r1);
    auto teacher = make_model_bundle(tiny_config(BlockKind::preln), r2);

    inherit_weights(student, teacher, default_inherit_mapping(student));
    CHECK(student.stem[0].w.raw() == teacher.stem[0].w.raw());
    CHECK(student.stem[1].w.raw() == teacher.stem[1].w.raw());
    CHECK(student.tok_embed.raw() == teacher.tok_embed.raw());
    CHECK(student.img_proj.raw() == teacher.img_proj.raw());
    // blocks are never inherited
    CHECK(student.img_blocks.sasp[0].mlp.w1.raw() != teacher.img_blocks.preln[0].mlp.w1.raw());

    // empty mapping leaves the student untouched
    auto before = student.tok_embed.raw();
    inherit_weights(student, teacher, {});
    CHECK(student.tok_embed.raw() == before);

    // a bad pair aborts with no partial copy
    Rng r3(6);
    auto cfg_small = tiny_config(BlockKind::sasp, 49);  // vocab mismatch
    auto student2 = make_model_bundle(cfg_small, r3);
    auto snapshot = student2.tok_embed.raw();
    auto snapshot_stem = student2.stem[0].w.raw();
    CHECK_THROWS_AS(inherit_weights(student2, teacher, default_inherit_mapping(student2)), ShapeError);
    CHECK(student2.tok_embed.raw() == snapshot);
    CHECK(student2.stem[0].w.raw() == snapshot_stem);

    CHECK_THROWS_AS(inherit_weights(student, teacher, {{"img.nonsense", "img.nonsense"}}), ValueError);
}

TEST_CASE("apply_freeze: masks, counting, gradient flow through frozen layers") {
    Rng rng(7);
    auto bundle = make_model_bundle(tiny_config(BlockKind::sasp), rng);

    auto mask = apply_freeze(bundle, FreezePolicy::inherited_frozen);
    CHECK(mask.is_frozen("img.stem.0.w"));
    CHECK(mask.is_frozen("txt.embed"));
    CHECK(mask.is_frozen("img.proj"));
    CHECK_FALSE(mask.is_frozen("img.mixers.0.wk"));
    CHECK_FALSE(mask.is_frozen("log_tau"));
    CHECK_FALSE(mask.is_frozen("pm.i2t.w"));

    std::size_t trainable = 0, total = 0;
    for (const auto& p : bundle.named_params()) {
        total += p.tensor.numel();
        if (p.tensor.requires_grad()) trainable += p.tensor.numel();
    }
    CHECK(trainable < total);
    CHECK(trainable > 0);

    // gradients still flow THROUGH the frozen projection into the blocks
    auto images = random_images(2, 32, 11);
    Tape<float> tape;
    auto emb = encode_image(images, bundle);
    auto loss = mean_reduce(emb);
    backward(loss, tape);
    CHECK_FALSE(bundle.img_proj.has_grad());                    // frozen: no grad buffer
    CHECK(bundle.img_blocks.mixer_groups[0]->w_k.has_grad());   // below the frozen head
    CHECK(bundle.img_blocks.sasp[0].mlp.w1.has_grad());

    // all_trainable: every parameter collects a grad after a full backward
    auto bundle2 = make_model_bundle(tiny_config(BlockKind::sasp), rng);
    apply_freeze(bundle2, FreezePolicy::all_trainable);
    Tape<float> tape2;
    auto v = encode_image(images, bundle2);
    std::vector<std::int32_t> toks(2 * 12, 0);
    toks[0] = 3;
    toks[12] = 4;
    auto t = encode_text(toks, 2, 12, bundle2);
    // touch every head: contrastive-style readout plus the pm heads
    auto sims = matmul(v, transpose(t));
    auto readout = add(mean_reduce(sims), mean_reduce(scale_by(sims, bundle2.tau())));
    auto pm_touch = add(mean_reduce(matmul(mul(v, t), bundle2.pm.i2t.w)),
                        mean_reduce(matmul(mul(t, v), bundle2.pm.t2i.w)));
    auto pm_bias = add(mean_reduce(add_rowwise(matmul(mul(v, t), bundle2.pm.i2t.w), bundle2.pm.i2t.b)),
                       mean_reduce(add_rowwise(matmul(mul(t, v), bundle2.pm.t2i.w), bundle2.pm.t2i.b)));
    auto loss2 = add(readout, add(pm_touch, pm_bias));
    backward(loss2, tape2);
    std::size_t with_grad = 0, count = 0;
    for (const auto& p : bundle2.named_params()) {
        ++count;
        if (p.tensor.has_grad()) ++with_grad;
    }
    CHECK(with_grad == count);
}

TEST_CASE("frozen params are bit-stable over optimizer-like writes to trainables") {
    Rng rng(8);
    auto bundle = make_model_bundle(tiny_config(BlockKind::sasp), rng);
    apply_freeze(bundle, FreezePolicy::inherited_frozen);
    auto frozen_snapshot = bundle.stem[0].w.raw();
    // poke every trainable tensor
    for (auto& p : bundle.named_params())
        if (p.tensor.requires_grad())
            for (auto& v : p.tensor.raw()) v += 0.001f;
    CHECK(bundle.stem[0].w.raw() == frozen_snapshot);
}
