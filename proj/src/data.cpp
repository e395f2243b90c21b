#include "picoclip/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace picoclip {

namespace {

float clamp01(float v) { return std::min(1.0f, std::max(0.0f, v)); }

std::uint8_t to_u8(float v) { return static_cast<std::uint8_t>(std::lround(clamp01(v) * 255.0f)); }

}  // namespace

Image make_image(int width, int height, float r, float g, float b) {
    Image img;
    img.width = width;
    img.height = height;
    img.rgb.resize(static_cast<std::size_t>(width) * height * 3);
    for (std::size_t i = 0; i < img.rgb.size(); i += 3) {
        img.rgb[i] = r;
        img.rgb[i + 1] = g;
        img.rgb[i + 2] = b;
    }
    return img;
}

void write_ppm(const Image& img, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for writing: " + path);
    f << "P6\n" << img.width << " " << img.height << "\n255\n";
    std::vector<std::uint8_t> bytes(img.rgb.size());
    for (std::size_t i = 0; i < img.rgb.size(); ++i) bytes[i] = to_u8(img.rgb[i]);
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("short write: " + path);
}

Image read_ppm(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open: " + path);
    std::string magic;
    f >> magic;
    if (magic != "P6") throw IoError("not a P6 ppm: " + path);
    int w = 0, h = 0, maxval = 0;
    f >> w >> h >> maxval;
    if (w <= 0 || h <= 0 || maxval != 255) throw IoError("unsupported ppm header in " + path);
    f.get();  // single whitespace after maxval
    std::vector<std::uint8_t> bytes(static_cast<std::size_t>(w) * h * 3);
    f.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (f.gcount() != static_cast<std::streamsize>(bytes.size())) throw IoError("truncated ppm: " + path);
    Image img = make_image(w, h);
    for (std::size_t i = 0; i < bytes.size(); ++i) img.rgb[i] = static_cast<float>(bytes[i]) / 255.0f;
    return img;
}

// ---------------------------------------------------------------------------
// captions and vocabulary
// ---------------------------------------------------------------------------

namespace {

const std::vector<std::string> kShapes = {"circle", "square", "triangle", "cross"};
const std::vector<std::string> kSizes = {"small", "big"};
const std::vector<std::string> kPositions = {"upper left", "upper right", "lower left", "lower right", "center"};

struct NamedColor {
    const char* name;
    float r, g, b;
};
const std::vector<NamedColor> kColors = {
    {"red", 0.85f, 0.15f, 0.12f},   {"green", 0.16f, 0.65f, 0.22f}, {"blue", 0.15f, 0.25f, 0.85f},
    {"yellow", 0.92f, 0.85f, 0.1f}, {"purple", 0.55f, 0.2f, 0.7f},  {"orange", 0.95f, 0.55f, 0.1f},
    {"cyan", 0.15f, 0.8f, 0.8f},    {"magenta", 0.85f, 0.2f, 0.65f}};

// Caption templates. Index 0 renders the original caption; synthetic caption
// i uses template i+1, so a sample's caption set is deterministic and the
// paraphrases reuse the same content words in different frames.
std::string render_caption(std::size_t tmpl, const SampleLatents& l) {
    switch (tmpl) {
        case 0: return "a " + l.size + " " + l.color + " " + l.shape + " in the " + l.position;
        case 1: return "the " + l.position + " of the image shows a " + l.size + " " + l.color + " " + l.shape;
        case 2: return "there is a " + l.size + " " + l.color + " " + l.shape + " near the " + l.position;
        case 3: return "photo of a " + l.color + " " + l.shape + " , " + l.size + " , at the " + l.position;
        case 4: return "one " + l.color + " " + l.shape + " of " + l.size + " size sits in the " + l.position;
        case 5: return "an image with a " + l.size + " " + l.shape + " colored " + l.color + " in the " + l.position;
        default: throw ValueError("caption template " + std::to_string(tmpl) + " not defined (max m is 5)");
    }
}

}  // namespace

std::vector<std::string> tokenize(const std::string& caption) {
    std::vector<std::string> out;
    std::istringstream is(caption);
    std::string tok;
    while (is >> tok) out.push_back(tok);
    return out;
}

std::int32_t Vocabulary::lookup(const std::string& token) const {
    auto it = token_to_id.find(token);
    if (it == token_to_id.end()) throw ValueError("token not in vocabulary: '" + token + "'");
    return it->second;
}

Vocabulary builtin_vocabulary() {
    std::set<std::string> words;
    SampleLatents probe;
    for (const auto& s : kShapes)
        for (const auto& c : kColors)
            for (const auto& z : kSizes)
                for (const auto& p : kPositions) {
                    probe = {s, c.name, z, p};
                    for (std::size_t t = 0; t < 6; ++t)
                        for (const auto& w : tokenize(render_caption(t, probe))) words.insert(w);
                }
    Vocabulary v;
    v.id_to_token.push_back("<pad>");
    for (const auto& w : words) v.id_to_token.push_back(w);
    for (std::size_t i = 0; i < v.id_to_token.size(); ++i)
        v.token_to_id[v.id_to_token[i]] = static_cast<std::int32_t>(i);
    return v;
}

void write_vocabulary(const Vocabulary& v, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for writing: " + path);
    for (const auto& t : v.id_to_token) f << t << "\n";
}

Vocabulary read_vocabulary(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open: " + path);
    Vocabulary v;
    std::string line;
    while (std::getline(f, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        v.token_to_id[line] = static_cast<std::int32_t>(v.id_to_token.size());
        v.id_to_token.push_back(line);
    }
    if (v.id_to_token.empty() || v.id_to_token[0] != "<pad>") throw IoError("vocabulary must start with <pad>: " + path);
    return v;
}

// ---------------------------------------------------------------------------
// generator
// ---------------------------------------------------------------------------

namespace {

void draw_shape(Image& img, const std::string& shape, float cx, float cy, float radius, float r, float g, float b) {
    const int w = img.width, h = img.height;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const float dx = static_cast<float>(x) - cx;
            const float dy = static_cast<float>(y) - cy;
            bool inside = false;
            if (shape == "circle") {
                inside = dx * dx + dy * dy <= radius * radius;
            } else if (shape == "square") {
                inside = std::abs(dx) <= radius && std::abs(dy) <= radius;
            } else if (shape == "triangle") {
                // upright triangle: widens linearly toward the base
                inside = dy >= -radius && dy <= radius && std::abs(dx) <= (dy + radius) * 0.5f;
            } else if (shape == "cross") {
                const float arm = radius * 0.38f;
                inside = (std::abs(dx) <= arm && std::abs(dy) <= radius) || (std::abs(dy) <= arm && std::abs(dx) <= radius);
            }
            if (inside) {
                float* p = img.px(x, y);
                p[0] = r;
                p[1] = g;
                p[2] = b;
            }
        }
}

std::pair<float, float> position_center(const std::string& pos, int size) {
    const float lo = size * 0.27f, hi = size * 0.73f, mid = size * 0.5f;
    if (pos == "upper left") return {lo, lo};
    if (pos == "upper right") return {hi, lo};
    if (pos == "lower left") return {lo, hi};
    if (pos == "lower right") return {hi, hi};
    return {mid, mid};
}

json sample_to_json(const Sample& s) {
    json j;
    j["image"] = s.image_path;
    j["captions"] = s.captions;
    j["latents"] = {{"shape", s.latents.shape},
                    {"color", s.latents.color},
                    {"size", s.latents.size},
                    {"position", s.latents.position}};
    return j;
}

}  // namespace

Manifest gen_toy_dataset(std::size_t n, std::size_t m, std::uint64_t seed, const std::string& out_dir) {
    if (n < 1) throw ValueError("gen_toy_dataset: n must be at least 1");
    if (m > 5) throw ValueError("gen_toy_dataset: at most 5 synthetic captions are defined");
    std::error_code ec;
    fs::create_directories(fs::path(out_dir) / "images", ec);
    if (ec) throw IoError("cannot create " + out_dir + ": " + ec.message());

    constexpr int kSize = 32;
    Manifest man;
    man.dir = out_dir;
    man.vocab_file = "vocab.txt";
    man.seed = seed;
    man.n_synthetic = m;

    Vocabulary vocab = builtin_vocabulary();
    write_vocabulary(vocab, (fs::path(out_dir) / man.vocab_file).string());

    for (std::size_t i = 0; i < n; ++i) {
        Rng rng(derive_seed(seed, 0xDA7A, i));
        Sample s;
        s.latents.shape = kShapes[rng.uniform_index(kShapes.size())];
        const NamedColor& col = kColors[rng.uniform_index(kColors.size())];
        s.latents.color = col.name;
        s.latents.size = kSizes[rng.uniform_index(kSizes.size())];
        s.latents.position = kPositions[rng.uniform_index(kPositions.size())];

        // plain pale background, slightly varied so images are not identical
        const float bg = 0.78f + 0.14f * static_cast<float>(rng.uniform01());
        Image img = make_image(kSize, kSize, bg, bg, bg);
        auto [cx, cy] = position_center(s.latents.position, kSize);
        cx += static_cast<float>(rng.uniform(-1.5, 1.5));
        cy += static_cast<float>(rng.uniform(-1.5, 1.5));
        const float radius = s.latents.size == "small" ? static_cast<float>(rng.uniform(3.2, 4.6))
                                                       : static_cast<float>(rng.uniform(6.0, 8.0));
        draw_shape(img, s.latents.shape, cx, cy, radius, col.r, col.g, col.b);

        char name[48];
        std::snprintf(name, sizeof(name), "images/img_%05zu.ppm", i);
        s.image_path = name;
        write_ppm(img, (fs::path(out_dir) / s.image_path).string());

        for (std::size_t t = 0; t <= m; ++t) s.captions.push_back(render_caption(t, s.latents));
        man.samples.push_back(std::move(s));
    }

    std::ofstream mf((fs::path(out_dir) / "manifest.jsonl").string(), std::ios::binary);
    if (!mf) throw IoError("cannot write manifest in " + out_dir);
    json meta = {{"kind", "toy-clip-dataset"},
                 {"n", n},
                 {"m", m},
                 {"seed", seed},
                 {"vocab", man.vocab_file},
                 {"image_size", kSize}};
    mf << meta.dump() << "\n";
    for (const auto& s : man.samples) mf << sample_to_json(s).dump() << "\n";
    return man;
}

Manifest read_manifest(const std::string& dir) {
    std::ifstream mf((fs::path(dir) / "manifest.jsonl").string());
    if (!mf) throw IoError("cannot open manifest in " + dir);
    Manifest man;
    man.dir = dir;
    std::string line;
    if (!std::getline(mf, line)) throw IoError("empty manifest in " + dir);
    json meta = json::parse(line);
    man.vocab_file = meta.at("vocab").get<std::string>();
    man.seed = meta.at("seed").get<std::uint64_t>();
    man.n_synthetic = meta.at("m").get<std::size_t>();
    while (std::getline(mf, line)) {
        if (line.empty()) continue;
        json j = json::parse(line);
        Sample s;
        s.image_path = j.at("image").get<std::string>();
        s.captions = j.at("captions").get<std::vector<std::string>>();
        if (s.captions.empty()) throw IoError("sample without captions in " + dir);
        const json& l = j.at("latents");
        s.latents = {l.at("shape").get<std::string>(), l.at("color").get<std::string>(),
                     l.at("size").get<std::string>(), l.at("position").get<std::string>()};
        man.samples.push_back(std::move(s));
    }
    return man;
}

const std::string& choose_caption(const Sample& sample, Rng& rng) {
    if (sample.captions.empty()) throw ValueError("choose_caption: sample has no captions");
    return sample.captions[rng.uniform_index(sample.captions.size())];
}

// ---------------------------------------------------------------------------
// augmentation
// ---------------------------------------------------------------------------

CropRect sample_crop(int width, int height, const AugmentPolicy& policy, Rng& rng) {
    if (policy.crop_scale_lo > policy.crop_scale_hi) throw ValueError("sample_crop: scale lo > hi");
    const double area = static_cast<double>(width) * height;
    for (int attempt = 0; attempt < 10; ++attempt) {
        const double target = area * rng.uniform(policy.crop_scale_lo, policy.crop_scale_hi);
        const double log_lo = std::log(policy.crop_ratio_lo), log_hi = std::log(policy.crop_ratio_hi);
        const double ratio = std::exp(rng.uniform(log_lo, log_hi));
        int w = static_cast<int>(std::lround(std::sqrt(target * ratio)));
        int h = static_cast<int>(std::lround(std::sqrt(target / ratio)));
        if (w < 1 || h < 1 || w > width || h > height) continue;
        CropRect r;
        r.w = w;
        r.h = h;
        r.x = static_cast<int>(rng.uniform_index(static_cast<std::size_t>(width - w + 1)));
        r.y = static_cast<int>(rng.uniform_index(static_cast<std::size_t>(height - h + 1)));
        return r;
    }
    // center-crop fallback
    int side = std::min(width, height);
    return {(width - side) / 2, (height - side) / 2, side, side};
}

Image resize_bilinear(const Image& img, int out_w, int out_h) {
    Image out = make_image(out_w, out_h);
    const float sx = static_cast<float>(img.width) / out_w;
    const float sy = static_cast<float>(img.height) / out_h;
    for (int y = 0; y < out_h; ++y)
        for (int x = 0; x < out_w; ++x) {
            const float fx = (x + 0.5f) * sx - 0.5f;
            const float fy = (y + 0.5f) * sy - 0.5f;
            const int x0 = std::clamp(static_cast<int>(std::floor(fx)), 0, img.width - 1);
            const int y0 = std::clamp(static_cast<int>(std::floor(fy)), 0, img.height - 1);
            const int x1 = std::min(x0 + 1, img.width - 1);
            const int y1 = std::min(y0 + 1, img.height - 1);
            const float ax = std::clamp(fx - x0, 0.0f, 1.0f);
            const float ay = std::clamp(fy - y0, 0.0f, 1.0f);
            const float* p00 = img.px(x0, y0);
            const float* p10 = img.px(x1, y0);
            const float* p01 = img.px(x0, y1);
            const float* p11 = img.px(x1, y1);
            float* o = out.px(x, y);
            for (int c = 0; c < 3; ++c) {
                const float top = p00[c] * (1 - ax) + p10[c] * ax;
                const float bot = p01[c] * (1 - ax) + p11[c] * ax;
                o[c] = clamp01(top * (1 - ay) + bot * ay);
            }
        }
    return out;
}

Image random_resized_crop(const Image& img, const AugmentPolicy& policy, Rng& rng) {
    if (img.width < 8 || img.height < 8) throw ValueError("random_resized_crop: image smaller than 8x8");
    CropRect r = sample_crop(img.width, img.height, policy, rng);
    Image crop = make_image(r.w, r.h);
    for (int y = 0; y < r.h; ++y)
        for (int x = 0; x < r.w; ++x) {
            const float* s = img.px(r.x + x, r.y + y);
            float* d = crop.px(x, y);
            d[0] = s[0];
            d[1] = s[1];
            d[2] = s[2];
        }
    if (r.w == img.width && r.h == img.height) return img;  // identity crop
    return resize_bilinear(crop, img.width, img.height);
}

Image apply_augment_op(const Image& img, AugmentOp op, Rng& rng) {
    Image out = img;
    const int w = img.width, h = img.height;
    switch (op) {
        case AugmentOp::flip_h:
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x) {
                    const float* s = img.px(w - 1 - x, y);
                    float* d = out.px(x, y);
                    d[0] = s[0];
                    d[1] = s[1];
                    d[2] = s[2];
                }
            break;
        case AugmentOp::rotate90: {
            const std::size_t quarters = 1 + rng.uniform_index(3);
            out = img;
            for (std::size_t q = 0; q < quarters; ++q) {
                Image rot = make_image(out.height, out.width);
                for (int y = 0; y < out.height; ++y)
                    for (int x = 0; x < out.width; ++x) {
                        const float* s = out.px(x, y);
                        float* d = rot.px(out.height - 1 - y, x);
                        d[0] = s[0];
                        d[1] = s[1];
                        d[2] = s[2];
                    }
                out = std::move(rot);
            }
            break;
        }
        case AugmentOp::color_jitter: {
            float f[3];
            for (auto& v : f) v = static_cast<float>(rng.uniform(0.7, 1.3));
            for (std::size_t i = 0; i < out.rgb.size(); i += 3)
                for (int c = 0; c < 3; ++c) out.rgb[i + c] = clamp01(out.rgb[i + c] * f[c]);
            break;
        }
        case AugmentOp::posterize: {
            const float levels = static_cast<float>(3 + rng.uniform_index(4));  // 3..6
            for (auto& v : out.rgb) v = clamp01(std::round(v * levels) / levels);
            break;
        }
        case AugmentOp::cutout: {
            const int side = std::max(2, static_cast<int>(std::lround(w * rng.uniform(0.15, 0.35))));
            const int cx = static_cast<int>(rng.uniform_index(static_cast<std::size_t>(std::max(1, w - side + 1))));
            const int cy = static_cast<int>(rng.uniform_index(static_cast<std::size_t>(std::max(1, h - side + 1))));
            for (int y = cy; y < std::min(h, cy + side); ++y)
                for (int x = cx; x < std::min(w, cx + side); ++x) {
                    float* p = out.px(x, y);
                    p[0] = p[1] = p[2] = 0.5f;
                }
            break;
        }
        case AugmentOp::grayscale:
            for (std::size_t i = 0; i < out.rgb.size(); i += 3) {
                const float g = 0.299f * out.rgb[i] + 0.587f * out.rgb[i + 1] + 0.114f * out.rgb[i + 2];
                out.rgb[i] = out.rgb[i + 1] = out.rgb[i + 2] = clamp01(g);
            }
            break;
        case AugmentOp::contrast: {
            const float f = static_cast<float>(rng.uniform(0.6, 1.4));
            float mean = 0;
            for (float v : out.rgb) mean += v;
            mean /= static_cast<float>(out.rgb.size());
            for (auto& v : out.rgb) v = clamp01(mean + (v - mean) * f);
            break;
        }
        case AugmentOp::brightness: {
            const float delta = static_cast<float>(rng.uniform(-0.25, 0.25));
            for (auto& v : out.rgb) v = clamp01(v + delta);
            break;
        }
    }
    return out;
}

Image rand_augment_lite(const Image& img, const AugmentPolicy& policy, Rng& rng) {
    if (policy.rand_augment_n > kAugmentPool.size())
        throw ValueError("rand_augment_lite: n exceeds pool size " + std::to_string(kAugmentPool.size()));
    // draw n ops without replacement, apply in draw order
    std::vector<AugmentOp> pool(kAugmentPool.begin(), kAugmentPool.end());
    Image out = img;
    for (std::size_t k = 0; k < policy.rand_augment_n; ++k) {
        const std::size_t pick = rng.uniform_index(pool.size());
        const AugmentOp op = pool[pick];
        pool.erase(pool.begin() + static_cast<std::ptrdiff_t>(pick));
        out = apply_augment_op(out, op, rng);
    }
    return out;
}

// ---------------------------------------------------------------------------
// dataset + batches
// ---------------------------------------------------------------------------

ToyDataset::ToyDataset(Manifest manifest, Vocabulary vocab, std::size_t image_size, std::size_t max_len)
    : manifest_(std::move(manifest)), vocab_(std::move(vocab)), image_size_(image_size), max_len_(max_len) {
    images_.reserve(manifest_.samples.size());
    for (const auto& s : manifest_.samples) {
        Image img = read_ppm((fs::path(manifest_.dir) / s.image_path).string());
        if (img.width != static_cast<int>(image_size_) || img.height != static_cast<int>(image_size_))
            img = resize_bilinear(img, static_cast<int>(image_size_), static_cast<int>(image_size_));
        images_.push_back(std::move(img));
    }
}

ToyDataset ToyDataset::open(const std::string& dir, std::size_t image_size, std::size_t max_len) {
    Manifest man = read_manifest(dir);
    Vocabulary vocab = read_vocabulary((fs::path(dir) / man.vocab_file).string());
    return ToyDataset(std::move(man), std::move(vocab), image_size, max_len);
}

std::vector<std::int32_t> encode_caption(const std::string& caption, const Vocabulary& vocab, std::size_t max_len) {
    std::vector<std::int32_t> ids;
    for (const auto& tok : tokenize(caption)) ids.push_back(vocab.lookup(tok));
    if (ids.empty()) throw ValueError("encode_caption: empty caption");
    if (ids.size() > max_len)
        throw ValueError("caption length " + std::to_string(ids.size()) + " exceeds max_len " + std::to_string(max_len));
    ids.resize(max_len, Vocabulary::pad_id);
    return ids;
}

ToyDataset::Batch ToyDataset::make_batch(const std::vector<std::size_t>& indices, const AugmentPolicy& policy,
                                         std::uint64_t batch_seed, int caption_index) const {
    const std::size_t b = indices.size();
    if (b == 0) throw ValueError("make_batch: empty index list");
    const std::size_t s = image_size_;
    Batch out;
    out.batch = b;
    out.max_len = max_len_;
    out.images = Tensor<float>::zeros({b, 3, s, s});
    out.tokens.resize(b * max_len_);

    for (std::size_t i = 0; i < b; ++i) {
        const std::size_t idx = indices[i];
        if (idx >= manifest_.samples.size()) throw ValueError("make_batch: sample index out of range");
        const Sample& sample = manifest_.samples[idx];
        Rng rng(derive_seed(batch_seed, 0xBA7C, i, idx));

        Image img = images_[idx];
        if (policy.enabled) {
            img = random_resized_crop(img, policy, rng);
            img = rand_augment_lite(img, policy, rng);
        }
        float* dst = out.images.raw().data() + i * 3 * s * s;
        for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t p = 0; p < s * s; ++p) dst[c * s * s + p] = img.rgb[p * 3 + c];

        const std::string& caption = caption_index >= 0
                                         ? sample.captions.at(static_cast<std::size_t>(caption_index))
                                         : choose_caption(sample, rng);
        std::vector<std::int32_t> ids = encode_caption(caption, vocab_, max_len_);
        std::copy(ids.begin(), ids.end(), out.tokens.begin() + static_cast<std::ptrdiff_t>(i * max_len_));
    }
    return out;
}

}  // namespace picoclip
