#include "picoclip/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace picoclip {

PMFusion pm_fusion_from_string(const std::string& s) {
    if (s == "hadamard") return PMFusion::hadamard;
    if (s == "concat") return PMFusion::concat;
    throw ValueError("unknown pm fusion '" + s + "' (expected hadamard|concat)");
}

std::string to_string(PMFusion f) { return f == PMFusion::hadamard ? "hadamard" : "concat"; }

namespace {

template <typename T>
void require_batch(const Tensor<T>& v, const Tensor<T>& t, const char* op, std::size_t min_b = 2) {
    if (!v.defined() || !t.defined()) throw ValueError(std::string(op) + ": undefined embeddings");
    if (v.shape() != t.shape())
        throw ShapeError(std::string(op) + ": image/text shapes differ, " + format_shape(v.shape()) + " vs " +
                         format_shape(t.shape()));
    if (v.rows() < min_b)
        throw ValueError(std::string(op) + ": batch size " + std::to_string(v.rows()) + " below minimum " +
                         std::to_string(min_b));
}

template <typename T>
Tensor<T> inv_tau_of(const Tensor<T>& tau) {
    if (tau.numel() != 1) throw ShapeError("temperature must be a 1-element tensor");
    if (tau.raw()[0] <= T(0)) throw ValueError("temperature must be positive");
    return reciprocal(tau);
}

// mean over rows of (logsumexp(row) - diagonal): cross-entropy with the
// aligned pair as target.
template <typename T>
Tensor<T> ce_diag_rows(const Tensor<T>& logits) {
    Tensor<T> lse = sum_reduce(logsumexp_rows(logits));
    Tensor<T> diag = sum_reduce(take_diag(logits));
    return scale(sub(lse, diag), T(1) / T(logits.rows()));
}

}  // namespace

template <typename T>
Tensor<T> similarity_matrix(const Tensor<T>& v, const Tensor<T>& t) {
    require_batch(v, t, "similarity_matrix", 1);
    return matmul(v, transpose(t));
}

template <typename T>
Tensor<T> clip_contrastive(const Tensor<T>& v, const Tensor<T>& t, const Tensor<T>& tau) {
    require_batch(v, t, "clip_contrastive");
    Tensor<T> logits = scale_by(similarity_matrix(v, t), inv_tau_of(tau));
    Tensor<T> i2t = ce_diag_rows(logits);
    Tensor<T> t2i = ce_diag_rows(transpose(logits));
    return scale(add(i2t, t2i), T(0.5));
}

template <typename T>
Tensor<T> fd_loss(const EmbeddingBatch<T>& b) {
    if (!b.has_teacher()) throw ValueError("fd_loss: teacher embeddings required");
    require_batch(b.v_s, b.t_s, "fd_loss", 1);
    require_batch(b.v_t, b.t_t, "fd_loss", 1);
    if (b.v_s.shape() != b.v_t.shape())
        throw ShapeError("fd_loss: student/teacher shapes differ, " + format_shape(b.v_s.shape()) + " vs " +
                         format_shape(b.v_t.shape()));
    Tensor<T> dv = sub(b.v_t, b.v_s);
    Tensor<T> dt = sub(b.t_t, b.t_s);
    Tensor<T> ssq = add(sum_reduce(mul(dv, dv)), sum_reduce(mul(dt, dt)));
    return scale(ssq, T(1) / (T(2) * T(b.batch())));
}

template <typename T>
Tensor<T> ic_loss(const EmbeddingBatch<T>& b, const Tensor<T>& tau, bool include_positive) {
    if (!b.has_teacher()) throw ValueError("ic_loss: teacher embeddings required");
    require_batch(b.v_s, b.t_s, "ic_loss");
    Tensor<T> inv_tau = inv_tau_of(tau);
    auto direction = [&](const Tensor<T>& query_s, const Tensor<T>& key_t) {
        Tensor<T> logits = scale_by(similarity_matrix(query_s, key_t), inv_tau);
        Tensor<T> denom = include_positive ? logsumexp_rows(logits) : logsumexp_rows_offdiag(logits);
        // -sum_k [ logit_kk - denom_k ]; summed, not averaged
        return sub(sum_reduce(denom), sum_reduce(take_diag(logits)));
    };
    Tensor<T> i2t = direction(b.v_s, b.t_t);
    Tensor<T> t2i = direction(b.t_s, b.v_t);
    return scale(add(i2t, t2i), T(0.5));
}

template <typename T>
Tensor<T> crd_loss(const EmbeddingBatch<T>& b, const Tensor<T>& tau) {
    if (!b.has_teacher()) throw ValueError("crd_loss: teacher embeddings required");
    require_batch(b.v_s, b.t_s, "crd_loss");
    Tensor<T> inv_tau = inv_tau_of(tau);
    Tensor<T> sim_s = scale_by(similarity_matrix(b.v_s, b.t_s), inv_tau);
    Tensor<T> sim_t = scale_by(similarity_matrix(b.v_t, b.t_t), inv_tau);
    auto kl_rows = [&](const Tensor<T>& t_logits, const Tensor<T>& s_logits) {
        Tensor<T> p = softmax_rows(t_logits);
        Tensor<T> diff = sub(log_softmax_rows(t_logits), log_softmax_rows(s_logits));
        return scale(sum_reduce(mul(p, diff)), T(1) / T(t_logits.rows()));
    };
    Tensor<T> row_dir = kl_rows(sim_t, sim_s);
    Tensor<T> col_dir = kl_rows(transpose(sim_t), transpose(sim_s));
    return scale(add(row_dir, col_dir), T(0.5));
}

template <typename T>
Tensor<T> kd_loss(const EmbeddingBatch<T>& b, const Tensor<T>& tau, const LossWeights& w, bool ic_include_positive) {
    Tensor<T> fd = scale(fd_loss(b), T(w.lambda1));
    Tensor<T> ic = scale(ic_loss(b, tau, ic_include_positive), T(w.lambda2));
    Tensor<T> crd = scale(crd_loss(b, tau), T(w.lambda3));
    return add(add(fd, ic), crd);
}

template <typename T>
NegativePick sample_negatives(const Tensor<T>& sims, T tau, Rng& rng) {
    const std::size_t b = sims.rows();
    if (sims.cols() != b) throw ShapeError("sample_negatives: square matrix required, got " + format_shape(sims.shape()));
    if (b < 2) throw ValueError("sample_negatives: batch size must be at least 2");
    if (tau <= T(0)) throw ValueError("sample_negatives: temperature must be positive");

    // softmax over the off-diagonal candidates, then inverse-CDF draw
    auto draw = [&](auto&& logit_at, std::size_t k) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < b; ++j)
            if (j != k) mx = std::max(mx, static_cast<double>(logit_at(j)) / static_cast<double>(tau));
        double total = 0;
        std::vector<double> p(b, 0.0);
        for (std::size_t j = 0; j < b; ++j) {
            if (j == k) continue;
            p[j] = std::exp(static_cast<double>(logit_at(j)) / static_cast<double>(tau) - mx);
            total += p[j];
        }
        double u = rng.uniform01() * total;
        double acc = 0;
        std::size_t last = k == b - 1 ? b - 2 : b - 1;
        for (std::size_t j = 0; j < b; ++j) {
            if (j == k) continue;
            acc += p[j];
            if (u < acc) return j;
            last = j;
        }
        return last;  // u landed on the rounding tail
    };

    NegativePick pick;
    pick.text_for_image.resize(b);
    pick.image_for_text.resize(b);
    for (std::size_t k = 0; k < b; ++k)
        pick.text_for_image[k] = draw([&](std::size_t j) { return sims(k, j); }, k);
    for (std::size_t k = 0; k < b; ++k)
        pick.image_for_text[k] = draw([&](std::size_t j) { return sims(j, k); }, k);
    return pick;
}

template <typename T>
PMHead<T> make_pm_head(std::size_t embed_dim, PMFusion fusion, Rng& rng) {
    const std::size_t in = fusion == PMFusion::hadamard ? embed_dim : 2 * embed_dim;
    PMHead<T> h;
    h.w = Tensor<T>::zeros({in, 2}, true);
    for (auto& v : h.w.raw()) v = static_cast<T>(rng.normal() / std::sqrt(static_cast<double>(in)));
    h.b = Tensor<T>::zeros({2}, true);
    return h;
}

namespace {

template <typename T>
Tensor<T> fuse_pair(const Tensor<T>& a, const Tensor<T>& b, PMFusion fusion) {
    if (fusion == PMFusion::hadamard) return mul(a, b);
    return concat_cols<T>({a, b});
}

// mean 2-class cross-entropy of `logits` rows against a constant class.
template <typename T>
Tensor<T> ce_const_label(const Tensor<T>& logits, std::size_t label) {
    Tensor<T> lse = sum_reduce(logsumexp_rows(logits));
    Tensor<T> picked = sum_reduce(take_col(logits, label));
    return scale(sub(lse, picked), T(1) / T(logits.rows()));
}

}  // namespace

template <typename T>
Tensor<T> pm_loss(const EmbeddingBatch<T>& b, const Tensor<T>& sims, const PMHeads<T>& heads, T lambda4, T tau,
                  Rng& rng) {
    require_batch(b.v_s, b.t_s, "pm_loss");
    if (lambda4 == T(0)) return Tensor<T>::scalar(T(0));
    constexpr std::size_t kNonMatch = 0, kMatch = 1;

    NegativePick pick = sample_negatives(sims, tau, rng);
    Tensor<T> t_neg = gather_rows(b.t_s, pick.text_for_image);
    Tensor<T> v_neg = gather_rows(b.v_s, pick.image_for_text);

    auto head_ce = [&](const PMHead<T>& head, const Tensor<T>& anchor, const Tensor<T>& pos, const Tensor<T>& neg) {
        Tensor<T> pos_logits = add_rowwise(matmul(fuse_pair(anchor, pos, heads.fusion), head.w), head.b);
        Tensor<T> neg_logits = add_rowwise(matmul(fuse_pair(anchor, neg, heads.fusion), head.w), head.b);
        // mean over the 2B pos+neg decisions
        Tensor<T> ce_pos = ce_const_label(pos_logits, kMatch);
        Tensor<T> ce_neg = ce_const_label(neg_logits, kNonMatch);
        return scale(add(ce_pos, ce_neg), T(0.5));
    };
    Tensor<T> i2t = head_ce(heads.i2t, b.v_s, b.t_s, t_neg);
    Tensor<T> t2i = head_ce(heads.t2i, b.t_s, b.v_s, v_neg);
    return scale(add(i2t, t2i), lambda4);
}

template <typename T>
std::pair<Tensor<T>, LossBreakdown<T>> total_loss(const EmbeddingBatch<T>& b, const Tensor<T>& tau,
                                                  const LossWeights& w, const PMHeads<T>* heads, Rng& rng,
                                                  const TotalLossOpts& opts) {
    LossBreakdown<T> parts;
    Tensor<T> clip = clip_contrastive(b.v_s, b.t_s, tau);
    parts.clip = clip.item();
    Tensor<T> loss = clip;

    if (opts.use_kd) {
        Tensor<T> fd = scale(fd_loss(b), T(w.lambda1));
        Tensor<T> ic = scale(ic_loss(b, tau, opts.ic_include_positive), T(w.lambda2));
        Tensor<T> crd = scale(crd_loss(b, tau), T(w.lambda3));
        parts.fd = fd.item();
        parts.ic = ic.item();
        parts.crd = crd.item();
        loss = add(loss, add(add(fd, ic), crd));
    }
    if (opts.use_pm) {
        if (!heads) throw ValueError("total_loss: pair-matching enabled but no heads supplied");
        Tensor<T> sims = similarity_matrix(b.v_s, b.t_s).detached();
        Tensor<T> pm = pm_loss(b, sims, *heads, T(w.lambda4), tau.raw()[0], rng);
        parts.pm = pm.item();
        loss = add(loss, pm);
    }
    parts.total = loss.item();
    return {loss, parts};
}

#define PICOCLIP_INSTANTIATE_LOSSES(T)                                                                            \
    template struct EmbeddingBatch<T>;                                                                            \
    template Tensor<T> similarity_matrix<T>(const Tensor<T>&, const Tensor<T>&);                                  \
    template Tensor<T> clip_contrastive<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                 \
    template Tensor<T> fd_loss<T>(const EmbeddingBatch<T>&);                                                      \
    template Tensor<T> ic_loss<T>(const EmbeddingBatch<T>&, const Tensor<T>&, bool);                              \
    template Tensor<T> crd_loss<T>(const EmbeddingBatch<T>&, const Tensor<T>&);                                   \
    template Tensor<T> kd_loss<T>(const EmbeddingBatch<T>&, const Tensor<T>&, const LossWeights&, bool);          \
    template NegativePick sample_negatives<T>(const Tensor<T>&, T, Rng&);                                         \
    template PMHead<T> make_pm_head<T>(std::size_t, PMFusion, Rng&);                                              \
    template Tensor<T> pm_loss<T>(const EmbeddingBatch<T>&, const Tensor<T>&, const PMHeads<T>&, T, T, Rng&);     \
    template std::pair<Tensor<T>, LossBreakdown<T>> total_loss<T>(const EmbeddingBatch<T>&, const Tensor<T>&,     \
                                                                  const LossWeights&, const PMHeads<T>*, Rng&,    \
                                                                  const TotalLossOpts&);

PICOCLIP_INSTANTIATE_LOSSES(float)
PICOCLIP_INSTANTIATE_LOSSES(double)

#undef PICOCLIP_INSTANTIATE_LOSSES

}  // namespace picoclip
