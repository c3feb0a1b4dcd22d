#pragma once

// Seeded synthetic lesion corpus: textured skin-tone background, one lesion
// blob per image with an exact mask, three shape families (ellipse, ring,
// star), class-correlated metadata, and an optional off-lesion corner marker
// that only the original stream can see. Images are PNG, masks PGM {0,255}.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "derma/image_io.hpp"
#include "derma/manifest.hpp"
#include "derma/rng.hpp"

namespace derma {

struct SynthSpec {
    int n = 200;
    int side = 64;
    std::vector<double> class_weights{1.0, 1.0, 1.0};  // ellipse, ring, star
    double marker_prob = 0.7;   // corner cue presence
    double site_corr = 0.8;     // P(site = class site | site present)
    double missing_meta = 0.15; // P(all metadata missing)
    double field_drop = 0.1;    // per-field missingness when metadata present
    double ambiguity = 0.35;    // fraction drawn near shape-family boundaries

    void validate() const {
        if (n < 3) throw std::invalid_argument("SynthSpec: need at least one sample per class");
        if (side < 16) throw std::invalid_argument("SynthSpec: side too small");
        if (class_weights.size() != 3)
            throw std::invalid_argument("SynthSpec: three class weights required");
        for (double w : class_weights)
            if (w <= 0.0) throw std::invalid_argument("SynthSpec: weights must be positive");
    }
};

inline std::vector<std::string> synth_class_names() { return {"ellipse", "ring", "star"}; }

/// Class-typical sites, drawn from the desk vocabulary.
inline std::vector<std::string> synth_class_sites() { return {"head", "torso", "leg"}; }

struct SynthSample {
    Image8 image;
    Image8 mask;
    int class_index = 0;
    std::optional<double> age;
    std::optional<std::string> sex;
    std::optional<std::string> site;
};

namespace detail {

inline std::uint8_t clamp_u8(double v) {
    return static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0));
}

}  // namespace detail

/// Renders one sample of the given class from its own rng stream.
inline SynthSample render_synth_sample(const SynthSpec& spec, int class_index, SeededRng& rng) {
    const int S = spec.side;
    SynthSample out;
    out.class_index = class_index;
    out.image = Image8(S, S, 3);
    out.mask = Image8(S, S, 1);

    // Background: shifted skin tone, low-frequency ripple, pixel noise.
    const double base[3] = {196 + rng.next_uniform(-18, 18), 160 + rng.next_uniform(-18, 18),
                            138 + rng.next_uniform(-18, 18)};
    const double fx = rng.next_uniform(0.5, 2.0) / S, fy = rng.next_uniform(0.5, 2.0) / S;
    const double phase = rng.next_uniform(0.0, 2.0 * std::numbers::pi);

    // Lesion geometry.
    const double cx = S / 2.0 + rng.next_uniform(-0.12, 0.12) * S;
    const double cy = S / 2.0 + rng.next_uniform(-0.12, 0.12) * S;
    const double r = rng.next_uniform(0.17, 0.28) * S;
    const bool near_boundary = rng.next_bernoulli(spec.ambiguity);

    // Family parameters; "near_boundary" draws shapes that resemble an ellipse.
    const double theta = rng.next_uniform(0.0, std::numbers::pi);
    const double ax = r * rng.next_uniform(0.85, 1.25);
    const double bx = r * rng.next_uniform(0.55, 0.85);
    const int star_k = 5 + static_cast<int>(rng.next_index(3));
    const double star_amp =
        near_boundary ? rng.next_uniform(0.08, 0.16) : rng.next_uniform(0.28, 0.45);
    const double star_phase = rng.next_uniform(0.0, 2.0 * std::numbers::pi);
    const double ring_inner =
        near_boundary ? rng.next_uniform(0.10, 0.22) : rng.next_uniform(0.38, 0.60);
    const double ring_squash = rng.next_uniform(0.9, 1.1);

    auto inside = [&](double x, double y) {
        const double dx = x - cx, dy = y - cy;
        switch (class_index) {
            case 0: {  // ellipse
                const double u = (dx * std::cos(theta) + dy * std::sin(theta)) / ax;
                const double v = (-dx * std::sin(theta) + dy * std::cos(theta)) / bx;
                return u * u + v * v <= 1.0;
            }
            case 1: {  // ring (annulus)
                const double d = std::sqrt(dx * dx + dy * dy * ring_squash * ring_squash);
                return d <= r && d >= ring_inner * r;
            }
            default: {  // star-convex
                const double d = std::sqrt(dx * dx + dy * dy);
                const double phi = std::atan2(dy, dx);
                return d <= r * (1.0 + star_amp * std::cos(star_k * phi + star_phase));
            }
        }
    };

    const double lesion[3] = {102 + rng.next_uniform(-14, 14), 66 + rng.next_uniform(-12, 12),
                              52 + rng.next_uniform(-12, 12)};
    auto noise_rng = rng.split(11);
    for (int y = 0; y < S; ++y)
        for (int x = 0; x < S; ++x) {
            const bool in = inside(x, y);
            out.mask.at(y, x, 0) = in ? 255 : 0;
            const double ripple = 10.0 * std::sin(2.0 * std::numbers::pi * (x * fx + y * fy) + phase);
            for (int c = 0; c < 3; ++c) {
                const double tone = in ? lesion[c] : base[c] + ripple;
                out.image.at(y, x, c) =
                    detail::clamp_u8(tone + noise_rng.next_normal(0.0, in ? 6.0 : 5.0));
            }
        }

    // Off-lesion marker in a class-specific corner; absent from the mask, so
    // masking removes it from the segmented stream.
    if (rng.next_bernoulli(spec.marker_prob)) {
        const int box = 5;
        const int margin = 3, span = 7;
        int ox = margin + static_cast<int>(rng.next_index(span));
        int oy = margin + static_cast<int>(rng.next_index(span));
        if (class_index == 1) ox = S - box - ox;
        if (class_index == 2) oy = S - box - oy;
        for (int y = oy; y < oy + box; ++y)
            for (int x = ox; x < ox + box; ++x)
                if (out.mask.at(y, x, 0) == 0) {
                    out.image.at(y, x, 0) = 232;
                    out.image.at(y, x, 1) = 228;
                    out.image.at(y, x, 2) = 72;
                }
    }

    // Metadata with class signal: age means 25/45/65, site correlated.
    if (!rng.next_bernoulli(spec.missing_meta)) {
        if (!rng.next_bernoulli(spec.field_drop)) {
            const double mean = 25.0 + 20.0 * class_index;
            out.age = std::clamp(rng.next_normal(mean, 12.0), 1.0, 95.0);
        }
        if (!rng.next_bernoulli(spec.field_drop))
            out.sex = rng.next_bernoulli(0.5) ? "male" : "female";
        if (!rng.next_bernoulli(spec.field_drop)) {
            if (rng.next_bernoulli(spec.site_corr)) {
                out.site = synth_class_sites()[class_index];
            } else {
                auto vocab = desk_site_vocab();
                out.site = vocab[rng.next_index(vocab.size() - 1)];  // excludes "unknown"
            }
        }
    }
    return out;
}

/// Writes `images/`, `masks/`, and `manifest.csv` under dir and returns the
/// loaded manifest. Classes are assigned by weighted round-robin so every
/// class is populated.
inline Manifest synth_generate(const std::string& dir, const SynthSpec& spec,
                               std::uint64_t seed) {
    spec.validate();
    namespace fs = std::filesystem;
    fs::create_directories(fs::path(dir) / "images");
    fs::create_directories(fs::path(dir) / "masks");

    // Largest-remainder apportionment of n across the class weights.
    double wsum = 0.0;
    for (double w : spec.class_weights) wsum += w;
    std::vector<int> quota(3);
    std::vector<std::pair<double, int>> frac;
    int assigned = 0;
    for (int c = 0; c < 3; ++c) {
        const double exact = spec.n * spec.class_weights[c] / wsum;
        quota[c] = std::max(1, static_cast<int>(std::floor(exact)));
        assigned += quota[c];
        frac.emplace_back(exact - std::floor(exact), c);
    }
    std::sort(frac.rbegin(), frac.rend());
    for (int i = 0; assigned < spec.n; ++i, ++assigned) ++quota[frac[i % 3].second];
    while (assigned > spec.n) {
        for (int c = 0; c < 3 && assigned > spec.n; ++c)
            if (quota[c] > 1) {
                --quota[c];
                --assigned;
            }
    }

    SeededRng root(seed);
    Manifest m;
    m.root = dir;
    const auto names = synth_class_names();
    int index = 0;
    for (int c = 0; c < 3; ++c)
        for (int k = 0; k < quota[c]; ++k, ++index) {
            auto rng = root.split(static_cast<std::uint64_t>(index));
            auto sample = render_synth_sample(spec, c, rng);
            char stem[32];
            std::snprintf(stem, sizeof stem, "img_%04d", index);
            const std::string img_rel = std::string("images/") + stem + ".png";
            const std::string msk_rel = std::string("masks/") + stem + ".pgm";
            write_png((fs::path(dir) / img_rel).string(), sample.image);
            write_pgm((fs::path(dir) / msk_rel).string(), sample.mask);
            ManifestRecord r;
            r.image = img_rel;
            r.mask = msk_rel;
            r.label = names[c];
            r.age = sample.age;
            r.sex = sample.sex;
            r.site = sample.site;
            m.records.push_back(std::move(r));
        }
    assign_label_indices(m);
    save_manifest((fs::path(dir) / "manifest.csv").string(), m);
    return load_manifest((fs::path(dir) / "manifest.csv").string());
}

}  // namespace derma
