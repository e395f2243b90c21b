#include "picoclip/blocks.hpp"

#include <cmath>

namespace picoclip {

BlockKind block_kind_from_string(const std::string& s) {
    if (s == "preln") return BlockKind::preln;
    if (s == "sasp") return BlockKind::sasp;
    throw ValueError("unknown block kind '" + s + "' (expected preln|sasp)");
}

std::string to_string(BlockKind k) { return k == BlockKind::preln ? "preln" : "sasp"; }

SharePolicy share_policy_from_string(const std::string& s) {
    if (s == "adjacent_pairs") return SharePolicy::adjacent_pairs;
    if (s == "all") return SharePolicy::all;
    if (s == "none") return SharePolicy::none;
    throw ValueError("unknown share policy '" + s + "' (expected adjacent_pairs|all|none)");
}

std::string to_string(SharePolicy p) {
    switch (p) {
        case SharePolicy::adjacent_pairs: return "adjacent_pairs";
        case SharePolicy::all: return "all";
        default: return "none";
    }
}

namespace {

template <typename T>
Tensor<T> random_normal(std::vector<std::size_t> shape, Rng& rng, double stddev, bool requires_grad = true) {
    Tensor<T> t = Tensor<T>::zeros(std::move(shape), requires_grad);
    for (auto& v : t.raw()) v = static_cast<T>(rng.normal() * stddev);
    return t;
}

}  // namespace

template <typename T>
std::size_t ShapedMixerParams<T>::param_count() const {
    return w_q.numel() + w_k.numel() + alpha.numel() + beta.numel() + gamma.numel();
}

template <typename T>
ShapedMixerParams<T> make_shaped_mixer(std::size_t d, std::size_t heads, Rng& rng, bool per_head_shape) {
    if (heads == 0 || d % heads != 0)
        throw ValueError("mixer: width " + std::to_string(d) + " not divisible by heads " + std::to_string(heads));
    ShapedMixerParams<T> p;
    p.d = d;
    p.heads = heads;
    p.w_q = Tensor<T>::zeros({d, d}, true);  // zero at init keeps attention at the identity
    p.w_k = random_normal<T>({d, d}, rng, 1.0 / std::sqrt(static_cast<double>(d)));
    const std::size_t s = per_head_shape ? heads : 1;
    p.alpha = Tensor<T>::full({s}, T(1), true);
    p.beta = Tensor<T>::full({s}, T(1), true);
    p.gamma = Tensor<T>::full({s}, T(1), true);
    return p;
}

template <typename T>
static MlpParams<T> make_mlp(std::size_t d, Rng& rng, bool zero_second) {
    MlpParams<T> m;
    const std::size_t hidden = 4 * d;
    m.w1 = random_normal<T>({d, hidden}, rng, 1.0 / std::sqrt(static_cast<double>(d)));
    m.b1 = Tensor<T>::zeros({hidden}, true);
    m.w2 = zero_second ? Tensor<T>::zeros({hidden, d}, true)
                       : random_normal<T>({hidden, d}, rng, 1.0 / std::sqrt(static_cast<double>(hidden)));
    m.b2 = Tensor<T>::zeros({d}, true);
    return m;
}

template <typename T>
SASPBlockParams<T> make_sasp_block(std::size_t d, std::size_t heads, Rng& rng,
                                   std::shared_ptr<ShapedMixerParams<T>> mixer, bool per_head_shape) {
    SASPBlockParams<T> b;
    b.mixer = mixer ? std::move(mixer)
                    : std::make_shared<ShapedMixerParams<T>>(make_shaped_mixer<T>(d, heads, rng, per_head_shape));
    b.ln_gain = Tensor<T>::full({d}, T(1), true);
    b.ln_bias = Tensor<T>::zeros({d}, true);
    b.mlp = make_mlp<T>(d, rng, /*zero_second=*/true);
    return b;
}

template <typename T>
PreLNBlockParams<T> make_preln_block(std::size_t d, std::size_t heads, Rng& rng, bool attn_bias) {
    if (heads == 0 || d % heads != 0)
        throw ValueError("preln block: width " + std::to_string(d) + " not divisible by heads " +
                         std::to_string(heads));
    PreLNBlockParams<T> b;
    b.heads = heads;
    b.attn_bias = attn_bias;
    const double s = 1.0 / std::sqrt(static_cast<double>(d));
    b.w_q = random_normal<T>({d, d}, rng, s);
    b.w_k = random_normal<T>({d, d}, rng, s);
    b.w_v = random_normal<T>({d, d}, rng, s);
    b.w_o = random_normal<T>({d, d}, rng, s);
    if (attn_bias) {
        b.b_q = Tensor<T>::zeros({d}, true);
        b.b_k = Tensor<T>::zeros({d}, true);
        b.b_v = Tensor<T>::zeros({d}, true);
        b.b_o = Tensor<T>::zeros({d}, true);
    }
    b.ln1_gain = Tensor<T>::full({d}, T(1), true);
    b.ln1_bias = Tensor<T>::zeros({d}, true);
    b.ln2_gain = Tensor<T>::full({d}, T(1), true);
    b.ln2_bias = Tensor<T>::zeros({d}, true);
    b.mlp = make_mlp<T>(d, rng, /*zero_second=*/false);
    return b;
}

SharedMixerRegistry share_mixers(std::size_t n_blocks, SharePolicy policy) {
    if (n_blocks == 0) throw ValueError("share_mixers: empty block list");
    SharedMixerRegistry reg;
    reg.assignment.resize(n_blocks);
    switch (policy) {
        case SharePolicy::none:
            for (std::size_t i = 0; i < n_blocks; ++i) reg.assignment[i] = i;
            reg.group_count = n_blocks;
            break;
        case SharePolicy::all:
            reg.group_count = 1;
            break;
        case SharePolicy::adjacent_pairs:
            for (std::size_t i = 0; i < n_blocks; ++i) reg.assignment[i] = i / 2;
            reg.group_count = (n_blocks + 1) / 2;
            break;
    }
    return reg;
}

template <typename T>
Tensor<T> shape_attention_rows(const Tensor<T>& sm, const Tensor<T>& alpha, const Tensor<T>& beta,
                               const Tensor<T>& gamma, std::size_t batch, std::size_t n) {
    const std::size_t rows = sm.rows(), cols = sm.cols();
    if (cols != n || rows % n != 0)
        throw ShapeError("shape_attention_rows: " + format_shape(sm.shape()) + " incompatible with n=" +
                         std::to_string(n));
    const std::size_t groups = rows / n;  // = batch * heads
    if (batch == 0 || groups % batch != 0)
        throw ShapeError("shape_attention_rows: group count not divisible by batch");
    const std::size_t heads = groups / batch;
    const std::size_t nscal = alpha.numel();
    if (!(nscal == heads || nscal == 1) || beta.numel() != nscal || gamma.numel() != nscal)
        throw ShapeError("shape_attention_rows: need one scalar per head or a single shared scalar");

    Tensor<T> out = Tensor<T>::zeros({rows, n});
    const T inv_n = T(1) / T(n);
    const auto& sv = sm.raw();
    auto& ov = out.raw();
    for (std::size_t g = 0; g < groups; ++g) {
        const std::size_t h = g % heads;
        const std::size_t hs = nscal == 1 ? 0 : h;
        const T a = alpha.raw()[hs], b = beta.raw()[hs], c = gamma.raw()[hs] * inv_n;
        for (std::size_t i = 0; i < n; ++i) {
            const T* srow = sv.data() + (g * n + i) * n;
            T* orow = ov.data() + (g * n + i) * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] = b * srow[j] - c;
            orow[i] += a;
        }
    }
    if (Tape<T>::current() &&
        (sm.requires_grad() || alpha.requires_grad() || beta.requires_grad() || gamma.requires_grad())) {
        out.set_requires_grad(true);
        auto smn = sm.node(), an = alpha.node(), bn = beta.node(), gn = gamma.node(), on = out.node();
        Tape<T>::current()->record([smn, an, bn, gn, on, groups, heads, n, nscal, inv_n] {
            if (on->grad.empty()) return;
            if (smn->requires_grad && smn->grad.empty()) smn->grad.assign(smn->value.size(), T(0));
            for (std::size_t g = 0; g < groups; ++g) {
                const std::size_t hs = nscal == 1 ? 0 : g % heads;
                const T b = bn->value[hs];
                for (std::size_t i = 0; i < n; ++i) {
                    const T* grow = on->grad.data() + (g * n + i) * n;
                    if (smn->requires_grad) {
                        T* gs = smn->grad.data() + (g * n + i) * n;
                        for (std::size_t j = 0; j < n; ++j) gs[j] += b * grow[j];
                    }
                    T rowsum = 0;
                    for (std::size_t j = 0; j < n; ++j) rowsum += grow[j];
                    if (an->requires_grad) {
                        if (an->grad.empty()) an->grad.assign(an->value.size(), T(0));
                        an->grad[hs] += grow[i];
                    }
                    if (bn->requires_grad) {
                        if (bn->grad.empty()) bn->grad.assign(bn->value.size(), T(0));
                        const T* srow = smn->value.data() + (g * n + i) * n;
                        T dot = 0;
                        for (std::size_t j = 0; j < n; ++j) dot += grow[j] * srow[j];
                        bn->grad[hs] += dot;
                    }
                    if (gn->requires_grad) {
                        if (gn->grad.empty()) gn->grad.assign(gn->value.size(), T(0));
                        gn->grad[hs] -= rowsum * inv_n;
                    }
                }
            }
        });
    }
    return out;
}

template <typename T>
ShapedAttentionResult<T> shaped_attention_batch(const Tensor<T>& x, const ShapedMixerParams<T>& p, std::size_t batch,
                                                bool capture_attn, bool scale_by_model_dim) {
    const std::size_t rows = x.rows(), d = x.cols();
    if (d != p.d) throw ShapeError("shaped_attention: input width " + std::to_string(d) + " != mixer width " +
                                   std::to_string(p.d));
    if (batch == 0 || rows % batch != 0) throw ShapeError("shaped_attention: rows not divisible by batch");
    const std::size_t n = rows / batch;
    const std::size_t heads = p.heads, dh = p.dh();

    Tensor<T> q = matmul(x, p.w_q);
    Tensor<T> k = matmul(x, p.w_k);
    Tensor<T> qh = split_heads(q, batch, n, heads, dh);
    Tensor<T> kh = split_heads(k, batch, n, heads, dh);
    Tensor<T> scores = batched_matmul_nt(qh, kh, batch * heads);
    const T denom = scale_by_model_dim ? T(1) / std::sqrt(T(d)) : T(1) / std::sqrt(T(dh));
    scores = scale(scores, denom);
    Tensor<T> sm = softmax_rows(scores);
    Tensor<T> attn = shape_attention_rows(sm, p.alpha, p.beta, p.gamma, batch, n);
    Tensor<T> xh = split_heads(x, batch, n, heads, dh);
    Tensor<T> yh = batched_matmul(attn, xh, batch * heads);
    Tensor<T> y = merge_heads(yh, batch, n, heads, dh);
    check_finite(y, "shaped_attention");

    ShapedAttentionResult<T> r;
    r.y = y;
    if (capture_attn) r.attn = attn.detached();
    return r;
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> shaped_attention(const Tensor<T>& x, const ShapedMixerParams<T>& p,
                                                 bool scale_by_model_dim) {
    auto r = shaped_attention_batch(x, p, 1, /*capture_attn=*/true, scale_by_model_dim);
    const std::size_t n = x.rows();
    Tensor<T> heads_stack = reshape(r.attn, {p.heads, n, n});
    return {r.y, heads_stack};
}

template <typename T>
ShapedAttentionResult<T> sasp_block_traced(const Tensor<T>& x, const SASPBlockParams<T>& p, std::size_t batch,
                                           bool capture_attn, bool scale_by_model_dim) {
    Tensor<T> nx = layer_norm(x, p.ln_gain, p.ln_bias, p.ln_eps);
    ShapedAttentionResult<T> att = shaped_attention_batch(nx, *p.mixer, batch, capture_attn, scale_by_model_dim);
    Tensor<T> h = gelu(add_rowwise(matmul(nx, p.mlp.w1), p.mlp.b1));
    Tensor<T> m = add_rowwise(matmul(h, p.mlp.w2), p.mlp.b2);
    ShapedAttentionResult<T> r;
    r.y = add(att.y, m);  // parallel branches over one normalization, no skip from x
    r.attn = att.attn;
    check_finite(r.y, "sasp_block");
    return r;
}

template <typename T>
Tensor<T> sasp_block(const Tensor<T>& x, const SASPBlockParams<T>& p, std::size_t batch, bool scale_by_model_dim) {
    return sasp_block_traced(x, p, batch, false, scale_by_model_dim).y;
}

template <typename T>
ShapedAttentionResult<T> preln_block_traced(const Tensor<T>& x, const PreLNBlockParams<T>& p, std::size_t batch,
                                            bool capture_attn) {
    const std::size_t rows = x.rows(), d = x.cols();
    if (batch == 0 || rows % batch != 0) throw ShapeError("preln_block: rows not divisible by batch");
    const std::size_t n = rows / batch;
    const std::size_t heads = p.heads, dh = d / heads;

    Tensor<T> n1 = layer_norm(x, p.ln1_gain, p.ln1_bias, p.ln_eps);
    Tensor<T> q = matmul(n1, p.w_q);
    Tensor<T> k = matmul(n1, p.w_k);
    Tensor<T> v = matmul(n1, p.w_v);
    if (p.attn_bias) {
        q = add_rowwise(q, p.b_q);
        k = add_rowwise(k, p.b_k);
        v = add_rowwise(v, p.b_v);
    }
    Tensor<T> qh = split_heads(q, batch, n, heads, dh);
    Tensor<T> kh = split_heads(k, batch, n, heads, dh);
    Tensor<T> vh = split_heads(v, batch, n, heads, dh);
    Tensor<T> scores = scale(batched_matmul_nt(qh, kh, batch * heads), T(1) / std::sqrt(T(dh)));
    Tensor<T> sm = softmax_rows(scores);
    Tensor<T> ctx = batched_matmul(sm, vh, batch * heads);
    Tensor<T> merged = merge_heads(ctx, batch, n, heads, dh);
    Tensor<T> attn_out = matmul(merged, p.w_o);
    if (p.attn_bias) attn_out = add_rowwise(attn_out, p.b_o);
    Tensor<T> x1 = add(x, attn_out);

    Tensor<T> n2 = layer_norm(x1, p.ln2_gain, p.ln2_bias, p.ln_eps);
    Tensor<T> h = gelu(add_rowwise(matmul(n2, p.mlp.w1), p.mlp.b1));
    Tensor<T> m = add_rowwise(matmul(h, p.mlp.w2), p.mlp.b2);

    ShapedAttentionResult<T> r;
    r.y = add(x1, m);
    if (capture_attn) r.attn = sm.detached();
    check_finite(r.y, "preln_block");
    return r;
}

template <typename T>
Tensor<T> preln_block(const Tensor<T>& x, const PreLNBlockParams<T>& p, std::size_t batch) {
    return preln_block_traced(x, p, batch, false).y;
}

std::size_t count_mixer_params(BlockKind kind, std::size_t d, std::size_t heads, bool attn_bias) {
    if (heads == 0 || d % heads != 0)
        throw ValueError("count_mixer_params: width " + std::to_string(d) + " not divisible by heads " +
                         std::to_string(heads));
    if (kind == BlockKind::preln) return 4 * d * d + (attn_bias ? 4 * d : 0);
    return 2 * d * d + 3 * heads;
}

std::size_t count_block_params(BlockKind kind, std::size_t d, std::size_t heads, bool attn_bias) {
    const std::size_t mlp = d * 4 * d + 4 * d + 4 * d * d + d;
    const std::size_t norms = (kind == BlockKind::preln ? 2 : 1) * 2 * d;
    return count_mixer_params(kind, d, heads, attn_bias) + mlp + norms;
}

std::size_t count_stack_mixer_params(BlockKind kind, std::size_t d, std::size_t heads, std::size_t n_blocks,
                                     SharePolicy policy, bool attn_bias) {
    if (kind == BlockKind::preln)  // sharing applies to the shaped mixers only
        return n_blocks * count_mixer_params(kind, d, heads, attn_bias);
    return share_mixers(n_blocks, policy).group_count * count_mixer_params(kind, d, heads, attn_bias);
}

#define PICOCLIP_INSTANTIATE_BLOCKS(T)                                                                              \
    template struct ShapedMixerParams<T>;                                                                           \
    template ShapedMixerParams<T> make_shaped_mixer<T>(std::size_t, std::size_t, Rng&, bool);                       \
    template SASPBlockParams<T> make_sasp_block<T>(std::size_t, std::size_t, Rng&,                                  \
                                                   std::shared_ptr<ShapedMixerParams<T>>, bool);                    \
    template PreLNBlockParams<T> make_preln_block<T>(std::size_t, std::size_t, Rng&, bool);                         \
    template Tensor<T> shape_attention_rows<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,                \
                                               const Tensor<T>&, std::size_t, std::size_t);                         \
    template ShapedAttentionResult<T> shaped_attention_batch<T>(const Tensor<T>&, const ShapedMixerParams<T>&,      \
                                                                std::size_t, bool, bool);                           \
    template std::pair<Tensor<T>, Tensor<T>> shaped_attention<T>(const Tensor<T>&, const ShapedMixerParams<T>&,     \
                                                                 bool);                                             \
    template Tensor<T> sasp_block<T>(const Tensor<T>&, const SASPBlockParams<T>&, std::size_t, bool);               \
    template ShapedAttentionResult<T> sasp_block_traced<T>(const Tensor<T>&, const SASPBlockParams<T>&,             \
                                                           std::size_t, bool, bool);                                \
    template Tensor<T> preln_block<T>(const Tensor<T>&, const PreLNBlockParams<T>&, std::size_t);                   \
    template ShapedAttentionResult<T> preln_block_traced<T>(const Tensor<T>&, const PreLNBlockParams<T>&,           \
                                                            std::size_t, bool);

PICOCLIP_INSTANTIATE_BLOCKS(float)
PICOCLIP_INSTANTIATE_BLOCKS(double)

#undef PICOCLIP_INSTANTIATE_BLOCKS

}  // namespace picoclip
