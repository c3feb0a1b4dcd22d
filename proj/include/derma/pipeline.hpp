#pragma once

// Sample preparation: resize, normalization, mask application, augmentation,
// stratified splitting, class balancing, and deterministic batch assembly.
// Augmentation happens on [0,1] tensors before normalization; segmented-image
// pixels outside the mask are exactly zero pre-normalization.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <iostream>
#include <numbers>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "derma/image_io.hpp"
#include "derma/manifest.hpp"
#include "derma/rng.hpp"
#include "derma/tensor.hpp"

namespace derma {

constexpr double kImagenetMean[3] = {0.485, 0.456, 0.406};
constexpr double kImagenetStd[3] = {0.229, 0.224, 0.225};

/// (3,H,W) tensor in [0,1] from an RGB image.
template <typename T>
Tensor<T> image_to_unit_tensor(const Image8& img) {
    if (img.channels != 3) throw std::invalid_argument("image_to_unit_tensor: RGB input required");
    Tensor<T> t({3, img.height, img.width});
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x)
                t.at(c, y, x) = static_cast<T>(img.at(y, x, c) / 255.0);
    return t;
}

template <typename T>
Image8 unit_tensor_to_image(const Tensor<T>& t) {
    if (t.rank() != 3 || t.shape()[0] != 3)
        throw std::invalid_argument("unit_tensor_to_image: needs (3,H,W)");
    Image8 img(t.shape()[2], t.shape()[1], 3);
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x) {
                const double v = std::clamp(static_cast<double>(t.at(c, y, x)), 0.0, 1.0);
                img.at(y, x, c) = static_cast<std::uint8_t>(std::lround(v * 255.0));
            }
    return img;
}

/// Bilinear resize of a (C,H,W) tensor, half-pixel centers.
template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& src, int out_h, int out_w) {
    if (src.rank() != 3) throw std::invalid_argument("resize_bilinear: needs (C,H,W)");
    const int C = src.shape()[0], H = src.shape()[1], W = src.shape()[2];
    Tensor<T> out({C, out_h, out_w});
    const double sy = static_cast<double>(H) / out_h, sx = static_cast<double>(W) / out_w;
    for (int y = 0; y < out_h; ++y) {
        const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, H - 1.0);
        const int y0 = static_cast<int>(fy), y1 = std::min(y0 + 1, H - 1);
        const double wy = fy - y0;
        for (int x = 0; x < out_w; ++x) {
            const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, W - 1.0);
            const int x0 = static_cast<int>(fx), x1 = std::min(x0 + 1, W - 1);
            const double wx = fx - x0;
            for (int c = 0; c < C; ++c) {
                const double v00 = src.at(c, y0, x0), v01 = src.at(c, y0, x1);
                const double v10 = src.at(c, y1, x0), v11 = src.at(c, y1, x1);
                out.at(c, y, x) = static_cast<T>((1 - wy) * ((1 - wx) * v00 + wx * v01) +
                                                 wy * ((1 - wx) * v10 + wx * v11));
            }
        }
    }
    return out;
}

template <typename T>
Tensor<T> resize_nearest(const Tensor<T>& src, int out_h, int out_w) {
    if (src.rank() != 3) throw std::invalid_argument("resize_nearest: needs (C,H,W)");
    const int C = src.shape()[0], H = src.shape()[1], W = src.shape()[2];
    Tensor<T> out({C, out_h, out_w});
    const double sy = static_cast<double>(H) / out_h, sx = static_cast<double>(W) / out_w;
    for (int y = 0; y < out_h; ++y) {
        const int iy = std::min(static_cast<int>((y + 0.5) * sy), H - 1);
        for (int x = 0; x < out_w; ++x) {
            const int ix = std::min(static_cast<int>((x + 0.5) * sx), W - 1);
            for (int c = 0; c < C; ++c) out.at(c, y, x) = src.at(c, iy, ix);
        }
    }
    return out;
}

/// (x/255 - mean) / std per channel, in place.
template <typename T>
void normalize_imagenet(Tensor<T>& unit) {
    if (unit.rank() != 3 || unit.shape()[0] != 3)
        throw std::invalid_argument("normalize_imagenet: needs (3,H,W)");
    const int hw = unit.shape()[1] * unit.shape()[2];
    for (int c = 0; c < 3; ++c)
        for (int i = 0; i < hw; ++i) {
            T& v = unit[static_cast<std::int64_t>(c) * hw + i];
            v = static_cast<T>((v - kImagenetMean[c]) / kImagenetStd[c]);
        }
}

template <typename T>
void denormalize_imagenet(Tensor<T>& t) {
    if (t.rank() != 3 || t.shape()[0] != 3)
        throw std::invalid_argument("denormalize_imagenet: needs (3,H,W)");
    const int hw = t.shape()[1] * t.shape()[2];
    for (int c = 0; c < 3; ++c)
        for (int i = 0; i < hw; ++i) {
            T& v = t[static_cast<std::int64_t>(c) * hw + i];
            v = static_cast<T>(v * kImagenetStd[c] + kImagenetMean[c]);
        }
}

/// Full inference-path preprocessing: bilinear resize to side, scale to [0,1],
/// ImageNet normalization.
template <typename T>
Tensor<T> preprocess(const Image8& img, int side) {
    auto t = resize_bilinear(image_to_unit_tensor<T>(img), side, side);
    normalize_imagenet(t);
    return t;
}

/// Elementwise product with a {0,1} mask, per channel, before normalization.
template <typename T>
Tensor<T> apply_mask(const Tensor<T>& unit_image, const Tensor<T>& mask01) {
    if (unit_image.rank() != 3 || mask01.rank() != 2 ||
        unit_image.shape()[1] != mask01.shape()[0] || unit_image.shape()[2] != mask01.shape()[1])
        throw std::invalid_argument("apply_mask: extent mismatch");
    Tensor<T> out = unit_image;
    const int H = mask01.shape()[0], W = mask01.shape()[1];
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) out.at(c, y, x) *= mask01.at(y, x);
    return out;
}

inline Image8 apply_mask(const Image8& original, const Image8& mask) {
    if (original.width != mask.width || original.height != mask.height || mask.channels != 1)
        throw std::invalid_argument("apply_mask: extent mismatch");
    Image8 out = original;
    for (int y = 0; y < out.height; ++y)
        for (int x = 0; x < out.width; ++x)
            if (mask.at(y, x, 0) == 0)
                for (int c = 0; c < out.channels; ++c) out.at(y, x, c) = 0;
    return out;
}

// ---- augmentation ----

struct AugParams {
    bool flip = false;
    double angle_deg = 0.0;
};

/// Horizontal flip with p = 0.5; rotation angle uniform in [-15, +15] degrees.
inline AugParams draw_augment_params(SeededRng& rng) {
    AugParams p;
    p.flip = rng.next_bernoulli(0.5);
    p.angle_deg = rng.next_uniform(-15.0, 15.0);
    return p;
}

namespace detail {

template <typename T>
Tensor<T> rotate_flip(const Tensor<T>& src, const AugParams& p, bool nearest) {
    const int C = src.shape()[0], H = src.shape()[1], W = src.shape()[2];
    Tensor<T> out({C, H, W});
    const double rad = p.angle_deg * std::numbers::pi / 180.0;
    const double co = std::cos(rad), si = std::sin(rad);
    const double cy = (H - 1) / 2.0, cx = (W - 1) / 2.0;
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            // Inverse map: rotate back, then undo the flip.
            const double dx = x - cx, dy = y - cy;
            double sxf = co * dx + si * dy + cx;
            const double syf = -si * dx + co * dy + cy;
            if (p.flip) sxf = (W - 1) - sxf;
            if (nearest) {
                const int iy = static_cast<int>(std::lround(syf));
                const int ix = static_cast<int>(std::lround(sxf));
                for (int c = 0; c < C; ++c)
                    out.at(c, y, x) = (iy >= 0 && iy < H && ix >= 0 && ix < W)
                                          ? src.at(c, iy, ix)
                                          : T(0);
            } else {
                const int y0 = static_cast<int>(std::floor(syf));
                const int x0 = static_cast<int>(std::floor(sxf));
                const double wy = syf - y0, wx = sxf - x0;
                for (int c = 0; c < C; ++c) {
                    double v = 0.0;
                    for (int oy = 0; oy < 2; ++oy)
                        for (int ox = 0; ox < 2; ++ox) {
                            const int yy = y0 + oy, xx = x0 + ox;
                            const double wgt =
                                (oy ? wy : 1 - wy) * (ox ? wx : 1 - wx);
                            if (yy >= 0 && yy < H && xx >= 0 && xx < W)
                                v += wgt * src.at(c, yy, xx);  // border stays black
                        }
                    out.at(c, y, x) = static_cast<T>(v);
                }
            }
        }
    return out;
}

}  // namespace detail

/// Applies flip-then-rotate to the image (bilinear) and, when given, the same
/// transform to its mask (nearest-neighbor, re-binarized).
template <typename T>
void augment(Tensor<T>& image01, Tensor<T>* mask01, const AugParams& p) {
    if (image01.rank() != 3) throw std::invalid_argument("augment: image must be (C,H,W)");
    if (!p.flip && p.angle_deg == 0.0) return;
    image01 = detail::rotate_flip(image01, p, false);
    if (mask01) {
        if (mask01->rank() != 2) throw std::invalid_argument("augment: mask must be (H,W)");
        Tensor<T> m3({1, mask01->shape()[0], mask01->shape()[1]});
        for (std::int64_t i = 0; i < mask01->size(); ++i) m3[i] = (*mask01)[i];
        m3 = detail::rotate_flip(m3, p, true);
        for (std::int64_t i = 0; i < mask01->size(); ++i)
            (*mask01)[i] = m3[i] >= T(0.5) ? T(1) : T(0);
    }
}

template <typename T>
void augment(Tensor<T>& image01, Tensor<T>* mask01, SeededRng& rng) {
    augment(image01, mask01, draw_augment_params(rng));
}

// ---- splitting and balancing ----

/// Stratified split; balancing is applied to the train half only, afterwards.
/// A class with fewer than 2 records goes to train with a warning.
inline std::pair<Manifest, Manifest> split_train_val(const Manifest& m, double fraction,
                                                     SeededRng& rng) {
    if (!(fraction > 0.0 && fraction < 1.0))
        throw std::invalid_argument("split_train_val: fraction must be in (0,1)");
    Manifest train, val;
    train.root = val.root = m.root;
    train.classes = val.classes = m.classes;
    std::vector<std::vector<std::size_t>> per_class(m.classes.size());
    for (std::size_t i = 0; i < m.records.size(); ++i)
        per_class[m.records[i].label_index].push_back(i);

    std::vector<bool> to_train(m.records.size(), true);
    for (std::size_t c = 0; c < per_class.size(); ++c) {
        auto& idx = per_class[c];
        const int n = static_cast<int>(idx.size());
        if (n < 2) {
            std::cerr << "split_train_val: class '" << m.classes[c]
                      << "' has fewer than 2 records, placing in train\n";
            continue;
        }
        for (int i = n - 1; i > 0; --i)
            std::swap(idx[i], idx[rng.next_index(static_cast<std::uint64_t>(i) + 1)]);
        int n_train = std::clamp(static_cast<int>(std::floor(n * fraction)), 1, n - 1);
        for (int i = n_train; i < n; ++i) to_train[idx[i]] = false;
    }
    for (std::size_t i = 0; i < m.records.size(); ++i)
        (to_train[i] ? train : val).records.push_back(m.records[i]);
    return {std::move(train), std::move(val)};
}

struct BalancePolicy {
    double target_factor = 1.0;  // T = upper-median class count x factor
    double cap_factor = 2.0;     // classes above cap_factor x T are subsampled
    int k_max = 10;              // max augmentation multiplicity per record
};

/// Expands minority classes with per-record augmentation multiplicities and
/// subsamples majority classes to the cap. Expansion clones carry distinct
/// augmentation seeds; a source row is never emitted twice with the same seed.
inline Manifest balance_manifest(const Manifest& m, const BalancePolicy& policy,
                                 SeededRng& rng) {
    if (m.records.empty()) throw std::invalid_argument("balance_manifest: empty manifest");
    auto counts = m.class_counts();
    for (std::size_t c = 0; c < counts.size(); ++c)
        if (counts[c] == 0)
            throw std::invalid_argument("balance_manifest: class '" + m.classes[c] +
                                        "' has no records");
    std::vector<int> sorted = counts;
    std::sort(sorted.begin(), sorted.end());
    const int upper_median = sorted[sorted.size() / 2];
    const int target = std::max(1, static_cast<int>(std::lround(upper_median * policy.target_factor)));
    const int cap = static_cast<int>(std::floor(target * policy.cap_factor));

    std::vector<std::vector<std::size_t>> per_class(m.classes.size());
    for (std::size_t i = 0; i < m.records.size(); ++i)
        per_class[m.records[i].label_index].push_back(i);

    Manifest out;
    out.root = m.root;
    out.classes = m.classes;
    auto seed_rng = rng.split(0x62616c616e636531ULL);
    std::vector<std::pair<std::size_t, ManifestRecord>> emitted;  // keyed for stable order
    for (std::size_t c = 0; c < per_class.size(); ++c) {
        auto idx = per_class[c];
        const int n = static_cast<int>(idx.size());
        if (n > cap) {
            for (int i = n - 1; i > 0; --i)
                std::swap(idx[i], idx[rng.next_index(static_cast<std::uint64_t>(i) + 1)]);
            idx.resize(static_cast<std::size_t>(cap));
            std::sort(idx.begin(), idx.end());
            for (auto i : idx) emitted.emplace_back(i, m.records[i]);
            continue;
        }
        if (n >= target) {
            for (auto i : idx) emitted.emplace_back(i, m.records[i]);
            continue;
        }
        const int effective = std::min(target, policy.k_max * n);
        const int base_mult = effective / n;
        const int remainder = effective % n;
        for (int i = n - 1; i > 0; --i)
            std::swap(idx[i], idx[rng.next_index(static_cast<std::uint64_t>(i) + 1)]);
        std::vector<int> mult(n, base_mult);
        for (int i = 0; i < remainder; ++i) ++mult[i];
        for (int i = 0; i < n; ++i) {
            const auto src = idx[i];
            emitted.emplace_back(src, m.records[src]);
            std::set<std::uint64_t> used;
            for (int k = 1; k < mult[i]; ++k) {
                ManifestRecord clone = m.records[src];
                std::uint64_t s;
                do {
                    s = seed_rng.next_u64() | 1ULL;  // nonzero
                } while (!used.insert(s).second);
                clone.aug_seed = s;
                emitted.emplace_back(src, std::move(clone));
            }
        }
    }
    std::stable_sort(emitted.begin(), emitted.end(),
                     [](const auto& a, const auto& b) { return a.first < b.first; });
    for (auto& [key, rec] : emitted) out.records.push_back(std::move(rec));
    return out;
}

// ---- sample loading and batch assembly ----

/// Decoded, resized, un-augmented sample kept in [0,1] pre-normalization form.
template <typename T>
struct LoadedSample {
    Tensor<T> image01;  // (3,S,S)
    Tensor<T> mask01;   // (S,S), empty tensor when record has no mask
    int label = -1;
    std::vector<T> meta_features;
    T meta_alpha = T(0);
    std::uint64_t aug_salt = 0;  // from the manifest aug_seed column
};

inline int env_worker_count() {
    const char* v = std::getenv("DERMA_NUM_WORKERS");
    if (!v) return 1;
    const int n = std::atoi(v);
    return n < 1 ? 1 : n;
}

/// Runs fn(i) for i in [0,n) across workers; each index owns its output slot,
/// so results are deterministic regardless of scheduling.
template <typename Fn>
void parallel_for(std::size_t n, int workers, Fn fn) {
    workers = std::max(1, std::min<int>(workers, static_cast<int>(n)));
    if (workers == 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
    for (int w = 0; w < workers; ++w)
        pool.emplace_back([&, w]() {
            try {
                for (std::size_t i = static_cast<std::size_t>(w); i < n;
                     i += static_cast<std::size_t>(workers))
                    fn(i);
            } catch (...) {
                errors[static_cast<std::size_t>(w)] = std::current_exception();
            }
        });
    for (auto& t : pool) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

template <typename T>
std::vector<LoadedSample<T>> load_samples(const Manifest& m, int side,
                                          const std::vector<std::string>& site_vocab,
                                          int workers = env_worker_count()) {
    std::vector<LoadedSample<T>> out(m.records.size());
    parallel_for(m.records.size(), workers, [&](std::size_t i) {
        const auto& r = m.records[i];
        LoadedSample<T> s;
        s.image01 = resize_bilinear(
            image_to_unit_tensor<T>(read_image(m.image_path(r).string())), side, side);
        if (!r.mask.empty()) {
            auto mg = to_gray(read_image(m.mask_path(r).string()));
            Tensor<T> m1({1, mg.height, mg.width});
            for (int y = 0; y < mg.height; ++y)
                for (int x = 0; x < mg.width; ++x)
                    m1.at(0, y, x) = mg.at(y, x, 0) >= 128 ? T(1) : T(0);
            m1 = resize_nearest(m1, side, side);
            s.mask01 = Tensor<T>({side, side});
            for (std::int64_t j = 0; j < s.mask01.size(); ++j) s.mask01[j] = m1[j];
        }
        s.label = r.label_index;
        auto enc = encode_metadata<T>(r, site_vocab);
        s.meta_features = std::move(enc.features);
        s.meta_alpha = enc.alpha;
        s.aug_salt = r.aug_seed.value_or(0);
        out[i] = std::move(s);
    });
    return out;
}

/// Deterministic per-(epoch, sample) augmentation stream: the salt separates
/// balancing clones of the same source image.
inline SeededRng sample_aug_rng(std::uint64_t epoch_seed, std::size_t index,
                                std::uint64_t salt) {
    SeededRng mix(epoch_seed ^ (0x9e3779b97f4a7c15ULL * (index + 1)));
    return mix.split(salt);
}

template <typename T>
struct SegBatch {
    Tensor<T> images;  // (B,3,S,S) normalized
    Tensor<T> masks;   // (B,1,S,S) in {0,1}
};

/// Builds a normalized batch from sample indices. In training mode each sample
/// is augmented from its own seeded stream; inference applies none.
template <typename T>
SegBatch<T> assemble_seg_batch(const std::vector<LoadedSample<T>>& samples,
                               const std::vector<std::size_t>& indices, bool training,
                               std::uint64_t epoch_seed) {
    if (indices.empty()) throw std::invalid_argument("assemble_seg_batch: empty batch");
    const int S = samples[indices[0]].image01.shape()[1];
    const int B = static_cast<int>(indices.size());
    SegBatch<T> batch;
    batch.images = Tensor<T>({B, 3, S, S});
    batch.masks = Tensor<T>({B, 1, S, S});
    for (int b = 0; b < B; ++b) {
        const auto& s = samples[indices[b]];
        if (s.mask01.size() == 0)
            throw std::invalid_argument("assemble_seg_batch: record has no mask");
        Tensor<T> img = s.image01;
        Tensor<T> msk = s.mask01;
        if (training) {
            auto rng = sample_aug_rng(epoch_seed, indices[b], s.aug_salt);
            augment(img, &msk, rng);
        }
        normalize_imagenet(img);
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < S; ++y)
                for (int x = 0; x < S; ++x) batch.images.at(b, c, y, x) = img.at(c, y, x);
        for (int y = 0; y < S; ++y)
            for (int x = 0; x < S; ++x) batch.masks.at(b, 0, y, x) = msk.at(y, x);
    }
    return batch;
}

template <typename T, typename MetaBatch>
struct ClsBatch {
    Tensor<T> original;   // (B,3,S,S) normalized
    Tensor<T> segmented;  // (B,3,S,S) masked pre-normalization, then normalized
    MetaBatch meta;
    std::vector<int> labels;
};

template <typename T, typename MetaBatch>
ClsBatch<T, MetaBatch> assemble_cls_batch(const std::vector<LoadedSample<T>>& samples,
                                          const std::vector<std::size_t>& indices,
                                          bool training, std::uint64_t epoch_seed,
                                          bool force_alpha_zero = false) {
    if (indices.empty()) throw std::invalid_argument("assemble_cls_batch: empty batch");
    const int S = samples[indices[0]].image01.shape()[1];
    const int B = static_cast<int>(indices.size());
    const int d = static_cast<int>(samples[indices[0]].meta_features.size());
    ClsBatch<T, MetaBatch> batch;
    batch.original = Tensor<T>({B, 3, S, S});
    batch.segmented = Tensor<T>({B, 3, S, S});
    batch.meta.features = Tensor<T>({B, d});
    batch.meta.alpha = Tensor<T>({B});
    batch.labels.resize(B);
    for (int b = 0; b < B; ++b) {
        const auto& s = samples[indices[b]];
        if (s.mask01.size() == 0)
            throw std::invalid_argument("assemble_cls_batch: record has no mask");
        Tensor<T> img = s.image01;
        Tensor<T> msk = s.mask01;
        if (training) {
            auto rng = sample_aug_rng(epoch_seed, indices[b], s.aug_salt);
            augment(img, &msk, rng);
        }
        Tensor<T> seg = apply_mask(img, msk);
        normalize_imagenet(img);
        normalize_imagenet(seg);
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < S; ++y)
                for (int x = 0; x < S; ++x) {
                    batch.original.at(b, c, y, x) = img.at(c, y, x);
                    batch.segmented.at(b, c, y, x) = seg.at(c, y, x);
                }
        for (int j = 0; j < d; ++j) batch.meta.features.at(b, j) = s.meta_features[j];
        batch.meta.alpha[b] = force_alpha_zero ? T(0) : s.meta_alpha;
        batch.labels[b] = s.label;
    }
    return batch;
}

}  // namespace derma
