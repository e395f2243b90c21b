#pragma once

// Procedural toy image-caption dataset. Each sample is a colored geometric
// shape on a plain background plus one original caption and m synthetic
// paraphrases of the same latent attributes; training picks one caption
// uniformly per visit. Generation is byte-deterministic given (seed, n, m).
//
// On-disk layout under a dataset directory:
//   images/img_%05d.ppm   P6, maxval 255, 32x32 RGB
//   manifest.jsonl        meta line, then one record per sample
//   vocab.txt             one token per line; line 0 is <pad>

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "picoclip/common.hpp"
#include "picoclip/tensor.hpp"

namespace picoclip {

// float RGB image, interleaved, values in [0, 1]
struct Image {
    int width = 0, height = 0;
    std::vector<float> rgb;

    float* px(int x, int y) { return rgb.data() + 3 * (static_cast<std::size_t>(y) * width + x); }
    const float* px(int x, int y) const { return rgb.data() + 3 * (static_cast<std::size_t>(y) * width + x); }
};

Image make_image(int width, int height, float r = 0, float g = 0, float b = 0);
void write_ppm(const Image& img, const std::string& path);
Image read_ppm(const std::string& path);

struct SampleLatents {
    std::string shape, color, size, position;
};

struct Sample {
    std::string image_path;               // relative to the manifest directory
    std::vector<std::string> captions;    // [0] original, [1..m] synthetic
    SampleLatents latents;
};

struct Manifest {
    std::string dir;          // dataset root
    std::string vocab_file;   // relative path
    std::uint64_t seed = 0;
    std::size_t n_synthetic = 0;
    std::vector<Sample> samples;
};

struct Vocabulary {
    std::vector<std::string> id_to_token;
    std::map<std::string, std::int32_t> token_to_id;

    static constexpr std::int32_t pad_id = 0;
    std::size_t size() const { return id_to_token.size(); }
    std::int32_t lookup(const std::string& token) const;  // throws on unknown token
};

std::vector<std::string> tokenize(const std::string& caption);

// The closed set of words the caption templates can emit.
Vocabulary builtin_vocabulary();
void write_vocabulary(const Vocabulary& v, const std::string& path);
Vocabulary read_vocabulary(const std::string& path);

Manifest gen_toy_dataset(std::size_t n, std::size_t m, std::uint64_t seed, const std::string& out_dir);
Manifest read_manifest(const std::string& dir);

const std::string& choose_caption(const Sample& sample, Rng& rng);

struct AugmentPolicy {
    double crop_scale_lo = 0.08, crop_scale_hi = 1.0;
    double crop_ratio_lo = 3.0 / 4.0, crop_ratio_hi = 4.0 / 3.0;
    std::size_t rand_augment_n = 2;  // ops drawn without replacement from the pool of 8
    bool enabled = true;
};

struct CropRect {
    int x = 0, y = 0, w = 0, h = 0;
};

// torchvision-style sampling: area fraction uniform in [lo,hi], aspect
// log-uniform, position uniform; center-crop fallback after 10 rejections.
CropRect sample_crop(int width, int height, const AugmentPolicy& policy, Rng& rng);
Image random_resized_crop(const Image& img, const AugmentPolicy& policy, Rng& rng);
Image resize_bilinear(const Image& img, int out_w, int out_h);

enum class AugmentOp : std::uint8_t { flip_h, rotate90, color_jitter, posterize, cutout, grayscale, contrast, brightness };
constexpr std::array<AugmentOp, 8> kAugmentPool = {AugmentOp::flip_h,    AugmentOp::rotate90, AugmentOp::color_jitter,
                                                   AugmentOp::posterize, AugmentOp::cutout,   AugmentOp::grayscale,
                                                   AugmentOp::contrast,  AugmentOp::brightness};

Image apply_augment_op(const Image& img, AugmentOp op, Rng& rng);
Image rand_augment_lite(const Image& img, const AugmentPolicy& policy, Rng& rng);

// Loaded dataset with all pixels resident; per-sample derived RNG streams keep
// batch assembly independent of any loader parallelism.
class ToyDataset {
public:
    ToyDataset(Manifest manifest, Vocabulary vocab, std::size_t image_size, std::size_t max_len);

    const Manifest& manifest() const { return manifest_; }
    const Vocabulary& vocab() const { return vocab_; }
    std::size_t size() const { return manifest_.samples.size(); }
    std::size_t image_size() const { return image_size_; }
    std::size_t max_len() const { return max_len_; }

    struct Batch {
        Tensor<float> images;             // B x 3 x S x S
        std::vector<std::int32_t> tokens; // B * L ids, padded with 0
        std::size_t batch = 0, max_len = 0;
    };

    // caption_index < 0 selects uniformly via the sample's derived stream
    Batch make_batch(const std::vector<std::size_t>& indices, const AugmentPolicy& policy, std::uint64_t batch_seed,
                     int caption_index = -1) const;

    static ToyDataset open(const std::string& dir, std::size_t image_size, std::size_t max_len);

private:
    Manifest manifest_;
    Vocabulary vocab_;
    std::size_t image_size_, max_len_;
    std::vector<Image> images_;
};

std::vector<std::int32_t> encode_caption(const std::string& caption, const Vocabulary& vocab, std::size_t max_len);

}  // namespace picoclip
