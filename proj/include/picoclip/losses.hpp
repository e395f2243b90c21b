#pragma once

// Training objectives. All embeddings are expected row-unit-norm so every
// dot product below is a cosine similarity, and with B matched pairs per
// batch the diagonal of V T^T holds the positives.
//
//  clip_contrastive  symmetric InfoNCE with logits S/tau, positives included
//                    in the denominator, mean over rows, mean of directions.
//  fd_loss           squared distance between student and teacher embeddings,
//                    image and text halves averaged.
//  ic_loss           interactive contrastive loss coupling student queries to
//                    teacher keys. The denominator runs over b != k only and
//                    terms are summed (not averaged) over the batch, so the
//                    value can be negative.
//  crd_loss          KL between teacher and student row softmaxes of the
//                    similarity matrix, averaged over the two orientations.
//  kd_loss           lambda1*FD + lambda2*IC + lambda3*CRD.
//  pm_loss           binary match/non-match heads over fused embedding pairs,
//                    negatives drawn from the similarity matrix.
//  total_loss        clip + kd + pm.

#include <cstdint>
#include <utility>
#include <vector>

#include "picoclip/common.hpp"
#include "picoclip/tensor.hpp"

namespace picoclip {

enum class PMFusion { hadamard, concat };
PMFusion pm_fusion_from_string(const std::string& s);
std::string to_string(PMFusion f);

template <typename T>
struct EmbeddingBatch {
    Tensor<T> v_s, t_s;  // student image/text embeddings, B x e
    Tensor<T> v_t, t_t;  // teacher embeddings; undefined when no teacher
    bool has_teacher() const { return v_t.defined() && t_t.defined(); }
    std::size_t batch() const { return v_s.rows(); }
};

struct LossWeights {
    double lambda1 = 4000.0;  // feature distillation
    double lambda2 = 1.0;     // interactive contrastive
    double lambda3 = 1.0;     // contrastive relational distillation
    double lambda4 = 0.1;     // pair matching
};

// B x B cosine similarity matrix S[i][j] = v_i . t_j (temperature applied at
// use-site).
template <typename T>
Tensor<T> similarity_matrix(const Tensor<T>& v, const Tensor<T>& t);

template <typename T>
Tensor<T> clip_contrastive(const Tensor<T>& v, const Tensor<T>& t, const Tensor<T>& tau);

template <typename T>
Tensor<T> fd_loss(const EmbeddingBatch<T>& b);

template <typename T>
Tensor<T> ic_loss(const EmbeddingBatch<T>& b, const Tensor<T>& tau, bool include_positive = false);

template <typename T>
Tensor<T> crd_loss(const EmbeddingBatch<T>& b, const Tensor<T>& tau);

template <typename T>
Tensor<T> kd_loss(const EmbeddingBatch<T>& b, const Tensor<T>& tau, const LossWeights& w,
                  bool ic_include_positive = false);

// Hard-negative picks: for image k a text index != k drawn with probability
// softmax over {S[k][b]/tau, b != k}; for text k an image index over column k.
struct NegativePick {
    std::vector<std::size_t> text_for_image;
    std::vector<std::size_t> image_for_text;
};
template <typename T>
NegativePick sample_negatives(const Tensor<T>& sims, T tau, Rng& rng);

template <typename T>
struct PMHead {
    Tensor<T> w, b;  // e x 2 (hadamard) or 2e x 2 (concat); logits {non-match, match}
};

template <typename T>
PMHead<T> make_pm_head(std::size_t embed_dim, PMFusion fusion, Rng& rng);

template <typename T>
struct PMHeads {
    PMHead<T> i2t, t2i;
    PMFusion fusion = PMFusion::hadamard;
};

// `tau` scales the similarity logits used for negative sampling (values only,
// no gradient flows through the sampling step).
template <typename T>
Tensor<T> pm_loss(const EmbeddingBatch<T>& b, const Tensor<T>& sims, const PMHeads<T>& heads, T lambda4, T tau,
                  Rng& rng);

// Weighted contributions as logged to the metrics CSV; total is their sum.
template <typename T>
struct LossBreakdown {
    T clip = 0, fd = 0, ic = 0, crd = 0, pm = 0, total = 0;
};

struct TotalLossOpts {
    bool use_kd = true;
    bool use_pm = true;
    bool ic_include_positive = false;
};

template <typename T>
std::pair<Tensor<T>, LossBreakdown<T>> total_loss(const EmbeddingBatch<T>& b, const Tensor<T>& tau,
                                                  const LossWeights& w, const PMHeads<T>* heads, Rng& rng,
                                                  const TotalLossOpts& opts);

}  // namespace picoclip
