#include "picoclip/encoders.hpp"

#include <cmath>

namespace picoclip {

FreezePolicy freeze_policy_from_string(const std::string& s) {
    if (s == "inherited_frozen") return FreezePolicy::inherited_frozen;
    if (s == "all_trainable") return FreezePolicy::all_trainable;
    throw ValueError("unknown freeze policy '" + s + "' (expected inherited_frozen|all_trainable)");
}

std::string to_string(FreezePolicy p) {
    return p == FreezePolicy::inherited_frozen ? "inherited_frozen" : "all_trainable";
}

namespace {

Tensor<float> random_normal(std::vector<std::size_t> shape, Rng& rng, double stddev) {
    Tensor<float> t = Tensor<float>::zeros(std::move(shape), true);
    for (auto& v : t.raw()) v = static_cast<float>(rng.normal() * stddev);
    return t;
}

BlockStack make_block_stack(BlockKind kind, std::size_t n_blocks, std::size_t d, std::size_t heads,
                            SharePolicy sharing, bool per_head_shape, Rng& rng) {
    BlockStack s;
    s.kind = kind;
    if (kind == BlockKind::preln) {
        for (std::size_t i = 0; i < n_blocks; ++i) s.preln.push_back(make_preln_block<float>(d, heads, rng));
        return s;
    }
    s.registry = share_mixers(n_blocks, sharing);
    s.mixer_groups.resize(s.registry.group_count);
    for (std::size_t g = 0; g < s.registry.group_count; ++g)
        s.mixer_groups[g] =
            std::make_shared<ShapedMixerParams<float>>(make_shaped_mixer<float>(d, heads, rng, per_head_shape));
    for (std::size_t i = 0; i < n_blocks; ++i)
        s.sasp.push_back(make_sasp_block<float>(d, heads, rng, s.mixer_groups[s.registry.assignment[i]],
                                                per_head_shape));
    return s;
}

void collect_block_params(const BlockStack& s, const std::string& prefix, std::vector<NamedParam>& out) {
    if (s.kind == BlockKind::sasp) {
        for (std::size_t g = 0; g < s.mixer_groups.size(); ++g) {
            const auto& m = *s.mixer_groups[g];
            const std::string p = prefix + ".mixers." + std::to_string(g);
            out.push_back({p + ".wq", m.w_q});
            out.push_back({p + ".wk", m.w_k});
            out.push_back({p + ".alpha", m.alpha});
            out.push_back({p + ".beta", m.beta});
            out.push_back({p + ".gamma", m.gamma});
        }
        for (std::size_t i = 0; i < s.sasp.size(); ++i) {
            const auto& b = s.sasp[i];
            const std::string p = prefix + ".blocks." + std::to_string(i);
            out.push_back({p + ".ln.g", b.ln_gain});
            out.push_back({p + ".ln.b", b.ln_bias});
            out.push_back({p + ".mlp.w1", b.mlp.w1});
            out.push_back({p + ".mlp.b1", b.mlp.b1});
            out.push_back({p + ".mlp.w2", b.mlp.w2});
            out.push_back({p + ".mlp.b2", b.mlp.b2});
        }
    } else {
        for (std::size_t i = 0; i < s.preln.size(); ++i) {
            const auto& b = s.preln[i];
            const std::string p = prefix + ".blocks." + std::to_string(i);
            out.push_back({p + ".attn.wq", b.w_q});
            out.push_back({p + ".attn.wk", b.w_k});
            out.push_back({p + ".attn.wv", b.w_v});
            out.push_back({p + ".attn.wo", b.w_o});
            if (b.attn_bias) {
                out.push_back({p + ".attn.bq", b.b_q});
                out.push_back({p + ".attn.bk", b.b_k});
                out.push_back({p + ".attn.bv", b.b_v});
                out.push_back({p + ".attn.bo", b.b_o});
            }
            out.push_back({p + ".ln1.g", b.ln1_gain});
            out.push_back({p + ".ln1.b", b.ln1_bias});
            out.push_back({p + ".ln2.g", b.ln2_gain});
            out.push_back({p + ".ln2.b", b.ln2_bias});
            out.push_back({p + ".mlp.w1", b.mlp.w1});
            out.push_back({p + ".mlp.b1", b.mlp.b1});
            out.push_back({p + ".mlp.w2", b.mlp.w2});
            out.push_back({p + ".mlp.b2", b.mlp.b2});
        }
    }
}

}  // namespace

std::size_t ModelBundle::image_tokens() const {
    std::size_t side = img_cfg.image_size;
    for (const auto& st : stem) side = (side + 2 * st.pad - st.kernel) / st.stride + 1;
    return side * side;
}

std::vector<NamedParam> ModelBundle::named_params() const {
    std::vector<NamedParam> out;
    for (std::size_t i = 0; i < stem.size(); ++i) {
        out.push_back({"img.stem." + std::to_string(i) + ".w", stem[i].w});
        out.push_back({"img.stem." + std::to_string(i) + ".b", stem[i].b});
    }
    out.push_back({"img.pos", img_pos});
    collect_block_params(img_blocks, "img", out);
    out.push_back({"img.final_ln.g", img_final_gain});
    out.push_back({"img.final_ln.b", img_final_bias});
    out.push_back({"img.proj", img_proj});

    out.push_back({"txt.embed", tok_embed});
    out.push_back({"txt.pos", txt_pos});
    collect_block_params(txt_blocks, "txt", out);
    out.push_back({"txt.final_ln.g", txt_final_gain});
    out.push_back({"txt.final_ln.b", txt_final_bias});
    out.push_back({"txt.proj", txt_proj});

    out.push_back({"log_tau", log_tau});
    out.push_back({"pm.i2t.w", pm.i2t.w});
    out.push_back({"pm.i2t.b", pm.i2t.b});
    out.push_back({"pm.t2i.w", pm.t2i.w});
    out.push_back({"pm.t2i.b", pm.t2i.b});
    return out;
}

ModelBundle make_model_bundle(const BundleConfig& cfg, Rng& rng) {
    if (cfg.img.d != cfg.txt.d)
        throw ValueError("bundle: image and text widths must match for the shared desk geometry");
    if (cfg.img.embed_dim != cfg.txt.embed_dim) throw ValueError("bundle: embed_dim mismatch between towers");
    if (cfg.txt.vocab_size == 0) throw ValueError("bundle: vocab_size must be set");

    ModelBundle b;
    b.img_cfg = cfg.img;
    b.txt_cfg = cfg.txt;
    b.sharing = cfg.sharing;
    b.per_head_shape = cfg.per_head_shape;
    b.scale_by_model_dim = cfg.scale_by_model_dim;

    std::vector<StemStage> stages = cfg.img.stem;
    if (stages.empty()) stages = {{16, 2, 3}, {cfg.img.d, 2, 3}};
    std::size_t in_ch = 3;
    for (const auto& st : stages) {
        ConvStage c;
        c.in_ch = in_ch;
        c.out_ch = st.out_channels;
        c.kernel = st.kernel;
        c.stride = st.stride;
        c.pad = st.kernel / 2;
        const std::size_t fan_in = in_ch * st.kernel * st.kernel;
        c.w = random_normal({fan_in, c.out_ch}, rng, 1.0 / std::sqrt(static_cast<double>(fan_in)));
        c.b = Tensor<float>::zeros({c.out_ch}, true);
        b.stem.push_back(std::move(c));
        in_ch = st.out_channels;
    }
    if (in_ch != cfg.img.d) throw ValueError("bundle: final stem channels must equal block width d");

    const std::size_t tokens = b.image_tokens();
    b.img_pos = random_normal({tokens, cfg.img.d}, rng, 0.02);
    b.img_blocks = make_block_stack(cfg.img.block_kind, cfg.img.n_blocks, cfg.img.d, cfg.img.heads, cfg.sharing,
                                    cfg.per_head_shape, rng);
    b.img_final_gain = Tensor<float>::full({cfg.img.d}, 1.0f, true);
    b.img_final_bias = Tensor<float>::zeros({cfg.img.d}, true);
    b.img_proj = random_normal({cfg.img.d, cfg.img.embed_dim}, rng, 1.0 / std::sqrt(static_cast<double>(cfg.img.d)));

    b.tok_embed = random_normal({cfg.txt.vocab_size, cfg.txt.d}, rng, 0.02);
    b.txt_pos = random_normal({cfg.txt.max_len, cfg.txt.d}, rng, 0.02);
    b.txt_blocks = make_block_stack(cfg.txt.block_kind, cfg.txt.n_blocks, cfg.txt.d, cfg.txt.heads, cfg.sharing,
                                    cfg.per_head_shape, rng);
    b.txt_final_gain = Tensor<float>::full({cfg.txt.d}, 1.0f, true);
    b.txt_final_bias = Tensor<float>::zeros({cfg.txt.d}, true);
    b.txt_proj = random_normal({cfg.txt.d, cfg.txt.embed_dim}, rng, 1.0 / std::sqrt(static_cast<double>(cfg.txt.d)));

    b.log_tau = Tensor<float>::scalar(std::log(cfg.tau_init), true);
    b.pm.fusion = cfg.pm_fusion;
    b.pm.i2t = make_pm_head<float>(cfg.img.embed_dim, cfg.pm_fusion, rng);
    b.pm.t2i = make_pm_head<float>(cfg.img.embed_dim, cfg.pm_fusion, rng);
    return b;
}

namespace {

Tensor<float> run_blocks(Tensor<float> x, const BlockStack& s, std::size_t batch, bool scale_by_model_dim,
                         EncoderTrace* trace) {
    const bool capture = trace != nullptr;
    if (s.kind == BlockKind::sasp) {
        for (const auto& blk : s.sasp) {
            auto r = sasp_block_traced(x, blk, batch, capture, scale_by_model_dim);
            if (capture) trace->block_attn.push_back(r.attn);
            x = r.y;
        }
    } else {
        for (const auto& blk : s.preln) {
            auto r = preln_block_traced(x, blk, batch, capture);
            if (capture) trace->block_attn.push_back(r.attn);
            x = r.y;
        }
    }
    return x;
}

}  // namespace

Tensor<float> encode_image(const Tensor<float>& images, const ModelBundle& bundle, EncoderTrace* trace) {
    if (images.ndim() != 4 || images.shape()[1] != 3)
        throw ShapeError("encode_image: expected B x 3 x S x S, got " + format_shape(images.shape()));
    const std::size_t batch = images.shape()[0];
    const std::size_t s = bundle.img_cfg.image_size;
    if (images.shape()[2] != s || images.shape()[3] != s)
        throw ShapeError("encode_image: expected image size " + std::to_string(s) + ", got " +
                         format_shape(images.shape()));

    Tensor<float> x = nchw_to_rows(images);
    std::size_t side = s;
    for (const auto& st : bundle.stem) {
        Tensor<float> cols = im2col_rows(x, batch, side, side, st.kernel, st.stride, st.pad);
        x = gelu(add_rowwise(matmul(cols, st.w), st.b));
        side = (side + 2 * st.pad - st.kernel) / st.stride + 1;
    }
    const std::size_t tokens = side * side;

    x = add(x, tile_rows(bundle.img_pos, batch));
    if (trace) {
        trace->batch = batch;
        trace->tokens = tokens;
        trace->heads = bundle.img_cfg.heads;
    }
    x = run_blocks(x, bundle.img_blocks, batch, bundle.scale_by_model_dim, trace);
    x = layer_norm(x, bundle.img_final_gain, bundle.img_final_bias, 1e-5f);
    std::vector<float> ones(batch * tokens, 1.0f);
    Tensor<float> pooled = row_group_weighted_mean(x, ones, batch);
    return l2_normalize_rows(matmul(pooled, bundle.img_proj));
}

Tensor<float> encode_text(const std::vector<std::int32_t>& tokens, std::size_t batch, std::size_t len,
                          const ModelBundle& bundle, EncoderTrace* trace) {
    if (tokens.size() != batch * len) throw ShapeError("encode_text: token count != batch * len");
    if (len != bundle.txt_cfg.max_len)
        throw ShapeError("encode_text: sequence length " + std::to_string(len) + " != configured max_len " +
                         std::to_string(bundle.txt_cfg.max_len));
    std::vector<std::size_t> idx(tokens.size());
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (tokens[i] < 0 || static_cast<std::size_t>(tokens[i]) >= bundle.txt_cfg.vocab_size)
            throw ValueError("encode_text: token id " + std::to_string(tokens[i]) + " outside vocabulary of " +
                             std::to_string(bundle.txt_cfg.vocab_size));
        idx[i] = static_cast<std::size_t>(tokens[i]);
    }

    Tensor<float> x = gather_rows(bundle.tok_embed, idx);
    x = add(x, tile_rows(bundle.txt_pos, batch));
    if (trace) {
        trace->batch = batch;
        trace->tokens = len;
        trace->heads = bundle.txt_cfg.heads;
    }
    x = run_blocks(x, bundle.txt_blocks, batch, bundle.scale_by_model_dim, trace);
    x = layer_norm(x, bundle.txt_final_gain, bundle.txt_final_bias, 1e-5f);
    std::vector<float> weights(tokens.size());
    for (std::size_t i = 0; i < tokens.size(); ++i) weights[i] = tokens[i] == 0 ? 0.0f : 1.0f;
    Tensor<float> pooled = row_group_weighted_mean(x, weights, batch);
    return l2_normalize_rows(matmul(pooled, bundle.txt_proj));
}

namespace {

bool is_inherited_name(const std::string& n) {
    static const std::vector<std::string> prefixes = {"img.stem.", "img.pos",      "img.final_ln.", "img.proj",
                                                      "txt.embed", "txt.pos",      "txt.final_ln.", "txt.proj"};
    for (const auto& p : prefixes)
        if (n.rfind(p, 0) == 0) return true;
    return false;
}

}  // namespace

std::vector<std::pair<std::string, std::string>> default_inherit_mapping(const ModelBundle& student,
                                                                         bool include_tau) {
    std::vector<std::pair<std::string, std::string>> m;
    for (const auto& p : student.named_params())
        if (is_inherited_name(p.name) || (include_tau && p.name == "log_tau")) m.emplace_back(p.name, p.name);
    return m;
}

void inherit_weights(ModelBundle& student, const ModelBundle& teacher,
                     const std::vector<std::pair<std::string, std::string>>& mapping) {
    std::map<std::string, Tensor<float>> s_params, t_params;
    for (auto& p : student.named_params()) s_params.emplace(p.name, p.tensor);
    for (auto& p : teacher.named_params()) t_params.emplace(p.name, p.tensor);

    // validate everything before copying anything
    std::vector<std::pair<Tensor<float>, Tensor<float>>> pairs;
    for (const auto& [s_name, t_name] : mapping) {
        auto si = s_params.find(s_name);
        auto ti = t_params.find(t_name);
        if (si == s_params.end()) throw ValueError("inherit_weights: unknown student tensor '" + s_name + "'");
        if (ti == t_params.end()) throw ValueError("inherit_weights: unknown teacher tensor '" + t_name + "'");
        if (si->second.shape() != ti->second.shape())
            throw ShapeError("inherit_weights: '" + s_name + "' " + format_shape(si->second.shape()) +
                             " vs teacher '" + t_name + "' " + format_shape(ti->second.shape()));
        pairs.emplace_back(si->second, ti->second);
    }
    for (auto& [dst, src] : pairs) dst.raw() = src.raw();
}

FreezeMask apply_freeze(ModelBundle& bundle, FreezePolicy policy) {
    FreezeMask mask;
    if (policy == FreezePolicy::inherited_frozen) {
        for (const auto& [name, _] : default_inherit_mapping(bundle, false)) mask.frozen.insert(name);
    }
    for (auto& p : bundle.named_params()) p.tensor.set_requires_grad(!mask.is_frozen(p.name));
    bundle.freeze = mask;
    return mask;
}

}  // namespace picoclip
