#pragma once

// Tabular sample index: CSV manifest loading/saving and clinical-metadata
// encoding. The CSV header is `image,mask,label,age,sex,site` with an optional
// trailing `aug_seed` column added by the balancing step. Blank fields mean
// "missing"; the availability mask is 0 only when age, sex, and site are all
// missing.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "derma/tensor.hpp"

namespace derma {

struct ManifestRecord {
    std::string image;  // path relative to the manifest directory
    std::string mask;   // empty when absent
    std::string label;
    std::optional<double> age;       // years
    std::optional<std::string> sex;  // male | female | unknown
    std::optional<std::string> site;
    std::optional<std::uint64_t> aug_seed;  // set for balancing expansions
    int label_index = -1;            // resolved against Manifest::classes
};

struct Manifest {
    std::filesystem::path root;  // directory paths are resolved against
    std::vector<ManifestRecord> records;
    std::vector<std::string> classes;  // sorted unique labels

    std::filesystem::path image_path(const ManifestRecord& r) const { return root / r.image; }
    std::filesystem::path mask_path(const ManifestRecord& r) const { return root / r.mask; }

    std::vector<int> class_counts() const {
        std::vector<int> counts(classes.size(), 0);
        for (const auto& r : records) ++counts[r.label_index];
        return counts;
    }
};

namespace detail {

inline std::string trim(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    std::size_t e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_csv_row(const std::string& line) {
    std::vector<std::string> fields;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            fields.push_back(trim(cur));
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    fields.push_back(trim(cur));
    return fields;
}

}  // namespace detail

/// Reindexes label_index by the sorted unique label set.
inline void assign_label_indices(Manifest& m) {
    m.classes.clear();
    for (const auto& r : m.records) m.classes.push_back(r.label);
    std::sort(m.classes.begin(), m.classes.end());
    m.classes.erase(std::unique(m.classes.begin(), m.classes.end()), m.classes.end());
    for (auto& r : m.records) {
        auto it = std::lower_bound(m.classes.begin(), m.classes.end(), r.label);
        r.label_index = static_cast<int>(it - m.classes.begin());
    }
}

/// Parses the manifest CSV. Malformed rows and unresolvable image paths are
/// rejected with the 1-based row number; `check_files=false` skips the
/// existence check (used by unit fixtures without pixel data).
inline Manifest load_manifest(const std::string& path, bool check_files = true) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open manifest " + path);
    Manifest m;
    m.root = std::filesystem::path(path).parent_path();

    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error(path + ": empty manifest file");
    auto header = detail::split_csv_row(line);
    const std::vector<std::string> base{"image", "mask", "label", "age", "sex", "site"};
    bool has_aug = header.size() == 7 && header[6] == "aug_seed";
    if (!(header.size() == 6 || has_aug) ||
        !std::equal(base.begin(), base.end(), header.begin()))
        throw std::runtime_error(path + ": header must be image,mask,label,age,sex,site[,aug_seed]");

    int row = 1;
    while (std::getline(in, line)) {
        ++row;
        if (detail::trim(line).empty()) continue;
        auto f = detail::split_csv_row(line);
        const std::size_t expected = has_aug ? 7 : 6;
        if (f.size() != expected)
            throw std::runtime_error(path + " row " + std::to_string(row) + ": expected " +
                                     std::to_string(expected) + " fields, got " +
                                     std::to_string(f.size()));
        ManifestRecord r;
        r.image = f[0];
        r.mask = f[1];
        r.label = f[2];
        if (r.image.empty() || r.label.empty())
            throw std::runtime_error(path + " row " + std::to_string(row) +
                                     ": image and label are required");
        if (!f[3].empty()) {
            try {
                std::size_t used = 0;
                r.age = std::stod(f[3], &used);
                if (used != f[3].size()) throw std::invalid_argument(f[3]);
            } catch (const std::exception&) {
                throw std::runtime_error(path + " row " + std::to_string(row) +
                                         ": bad age value '" + f[3] + "'");
            }
            if (*r.age < 0.0)
                throw std::runtime_error(path + " row " + std::to_string(row) + ": negative age");
        }
        if (!f[4].empty()) {
            if (f[4] != "male" && f[4] != "female" && f[4] != "unknown")
                throw std::runtime_error(path + " row " + std::to_string(row) +
                                         ": sex must be male|female|unknown, got '" + f[4] + "'");
            r.sex = f[4];
        }
        if (!f[5].empty()) r.site = f[5];
        if (has_aug && !f[6].empty()) {
            try {
                r.aug_seed = std::stoull(f[6]);
            } catch (const std::exception&) {
                throw std::runtime_error(path + " row " + std::to_string(row) +
                                         ": bad aug_seed '" + f[6] + "'");
            }
        }
        if (check_files) {
            if (!std::filesystem::exists(m.root / r.image))
                throw std::runtime_error(path + " row " + std::to_string(row) +
                                         ": missing image file " + r.image);
            if (!r.mask.empty() && !std::filesystem::exists(m.root / r.mask))
                throw std::runtime_error(path + " row " + std::to_string(row) +
                                         ": missing mask file " + r.mask);
        }
        m.records.push_back(std::move(r));
    }
    assign_label_indices(m);
    return m;
}

inline void save_manifest(const std::string& path, const Manifest& m) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write manifest " + path);
    bool has_aug = false;
    for (const auto& r : m.records) has_aug = has_aug || r.aug_seed.has_value();
    out << "image,mask,label,age,sex,site" << (has_aug ? ",aug_seed" : "") << "\n";
    for (const auto& r : m.records) {
        out << r.image << ',' << r.mask << ',' << r.label << ',';
        if (r.age) out << *r.age;
        out << ',';
        if (r.sex) out << *r.sex;
        out << ',';
        if (r.site) out << *r.site;
        if (has_aug) {
            out << ',';
            if (r.aug_seed) out << *r.aug_seed;
        }
        out << "\n";
    }
    if (!out) throw std::runtime_error("write failed on " + path);
}

/// Compact site vocabulary for desk-scale corpora; "unknown" is always last.
inline std::vector<std::string> desk_site_vocab() {
    return {"head", "neck", "torso", "arm", "hand", "leg", "foot", "unknown"};
}

/// HAM10000 localization tokens plus "unknown".
inline std::vector<std::string> ham10000_site_vocab() {
    return {"abdomen", "acral", "back",  "chest",           "ear",
            "face",    "foot",  "genital", "hand",          "lower extremity",
            "neck",    "scalp", "trunk",   "upper extremity", "unknown"};
}

/// Encodes one record as [age/100 clipped] ++ one-hot(sex) ++ one-hot(site),
/// with alpha = 0 only when all three fields are missing. An out-of-vocabulary
/// site maps to "unknown" with a warning.
template <typename T>
struct EncodedMetadata {
    std::vector<T> features;
    T alpha;
};

template <typename T>
EncodedMetadata<T> encode_metadata(const ManifestRecord& r,
                                   const std::vector<std::string>& site_vocab) {
    if (site_vocab.empty() || site_vocab.back() != "unknown")
        throw std::invalid_argument("encode_metadata: vocabulary must end with 'unknown'");
    EncodedMetadata<T> out;
    out.features.assign(1 + 3 + site_vocab.size(), T(0));
    if (r.age) out.features[0] = static_cast<T>(std::clamp(*r.age / 100.0, 0.0, 1.0));
    if (r.sex) {
        const int idx = *r.sex == "male" ? 0 : *r.sex == "female" ? 1 : 2;
        out.features[1 + idx] = T(1);
    }
    if (r.site) {
        auto it = std::find(site_vocab.begin(), site_vocab.end(), *r.site);
        std::size_t idx;
        if (it == site_vocab.end()) {
            std::cerr << "encode_metadata: site '" << *r.site << "' not in vocabulary, using unknown\n";
            idx = site_vocab.size() - 1;
        } else {
            idx = static_cast<std::size_t>(it - site_vocab.begin());
        }
        out.features[4 + idx] = T(1);
    }
    out.alpha = (!r.age && !r.sex && !r.site) ? T(0) : T(1);
    return out;
}

/// Stacks encoded rows into the (B,d) features + (B) alpha pair the classifier
/// consumes.
template <typename T, typename MetaBatch>
MetaBatch encode_metadata_batch(const std::vector<const ManifestRecord*>& records,
                                const std::vector<std::string>& site_vocab) {
    const int B = static_cast<int>(records.size());
    const int d = static_cast<int>(1 + 3 + site_vocab.size());
    MetaBatch out;
    out.features = Tensor<T>({B, d});
    out.alpha = Tensor<T>({B});
    for (int b = 0; b < B; ++b) {
        auto enc = encode_metadata<T>(*records[b], site_vocab);
        for (int j = 0; j < d; ++j) out.features.at(b, j) = enc.features[j];
        out.alpha[b] = enc.alpha;
    }
    return out;
}

}  // namespace derma
