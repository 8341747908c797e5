#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "wcmorph/csv.hpp"
#include "wcmorph/errors.hpp"
#include "wcmorph/image.hpp"
#include "wcmorph/rng.hpp"
#include "wcmorph/sphere.hpp"

namespace wcm {

// Procedural synthetic-face dataset: identity-parameterized renderings of
// anti-aliased geometric primitives with small nuisance variation, split
// into disjoint train/validation identity sets. Faces are pre-aligned by
// construction; the renderer is deliberately simple so a small encoder can
// reach high verification accuracy.

inline constexpr std::size_t kImageSize = 32;
inline constexpr std::size_t kIdentityParamCount = 12;

// params, all in [0,1]:
//   0 face width     1 face height    2 eye spacing   3 eye height
//   4 eye size       5 nose length    6 mouth width   7 mouth curvature
//   8 brow offset    9 skin tone     10 eye tone     11 mouth tone
struct IdentitySpec {
    int identity_id = 0;
    std::array<double, kIdentityParamCount> params{};
};

struct Nuisance {
    double shift_x = 0.0;      // pixels, [-2, 2]
    double shift_y = 0.0;      // pixels, [-2, 2]
    double brightness = 0.0;   // [-0.1, 0.1]
    double noise_sigma = 0.0;  // [0, 0.02]
};

enum class Split { train, validation };

inline const char* split_name(Split s) { return s == Split::train ? "train" : "validation"; }

struct DatasetRecord {
    int record_id = 0;
    int identity_id = 0;
    Split split = Split::train;
    Nuisance nuisance;
    std::uint64_t noise_seed = 0;
    std::string file;  // relative image path, set when saved/loaded
    Image image;
};

struct Dataset {
    std::uint64_t seed = 0;
    std::size_t n_identities = 0;
    std::size_t images_per_identity = 0;
    double train_fraction = 0.0;
    std::vector<IdentitySpec> identities;
    std::vector<DatasetRecord> records;
    std::vector<int> train_identity_ids;
    std::vector<int> validation_identity_ids;

    Split split_of(int identity_id) const {
        for (int id : train_identity_ids) {
            if (id == identity_id) return Split::train;
        }
        return Split::validation;
    }

    std::vector<const DatasetRecord*> records_in(Split s) const {
        std::vector<const DatasetRecord*> out;
        for (const auto& r : records) {
            if (r.split == s) out.push_back(&r);
        }
        return out;
    }

    std::vector<const DatasetRecord*> records_of_identity(int identity_id) const {
        std::vector<const DatasetRecord*> out;
        for (const auto& r : records) {
            if (r.identity_id == identity_id) out.push_back(&r);
        }
        return out;
    }
};

namespace detail {

// Coverage of an anti-aliased shape given a signed distance in uv units
// (negative inside). The falloff is a deliberately wide ~2.5 pixels so
// sub-pixel shifts change intensities smoothly.
inline double coverage(double sd) {
    constexpr double aa = 2.5 * 2.0 / static_cast<double>(kImageSize);
    return std::clamp(0.5 - sd / aa, 0.0, 1.0);
}

inline double ellipse_sd(double u, double v, double cx, double cy, double rx, double ry) {
    const double du = (u - cx) / rx;
    const double dv = (v - cy) / ry;
    return (std::sqrt(du * du + dv * dv) - 1.0) * std::min(rx, ry);
}

inline double bar_sd(double u, double v, double cx, double cy, double hw, double hh) {
    const double du = std::abs(u - cx) - hw;
    const double dv = std::abs(v - cy) - hh;
    return std::max(du, dv);
}

inline void blend(double& dst, double tone, double cov) { dst += (tone - dst) * cov; }

} // namespace detail

// Deterministic rendering of one face. The rng seed drives only the pixel
// noise; everything else is a pure function of (spec, nuisance).
inline Image render_identity(const IdentitySpec& spec, const Nuisance& nu, std::uint64_t seed) {
    for (double p : spec.params) {
        if (!(p >= 0.0 && p <= 1.0)) {
            throw ArgumentError("render_identity: identity params must lie in [0,1]");
        }
    }
    if (std::abs(nu.shift_x) > 2.0 || std::abs(nu.shift_y) > 2.0 ||
        std::abs(nu.brightness) > 0.1 || nu.noise_sigma < 0.0 || nu.noise_sigma > 0.02) {
        throw ArgumentError("render_identity: nuisance out of range");
    }
    // effect ranges are balanced so every parameter moves a comparable
    // amount of image mass; identity distances then concentrate like a
    // genuine 12-dimensional cloud
    const auto& p = spec.params;
    const double face_rx = 0.66 + 0.14 * p[0];
    const double face_ry = 0.74 + 0.13 * p[1];
    const double eye_dx = 0.20 + 0.20 * p[2];
    const double eye_y = -0.40 + 0.20 * p[3];
    const double eye_r = 0.08 + 0.12 * p[4];
    const double nose_len = 0.10 + 0.32 * p[5];
    const double mouth_hw = 0.12 + 0.43 * p[6];
    const double mouth_curve = (p[7] - 0.5) * 0.5;
    const double brow_dy = 0.10 + 0.22 * p[8];
    const double skin = 0.58 + 0.20 * p[9];
    const double eye_tone = 0.02 + 0.38 * p[10];
    const double mouth_tone = 0.05 + 0.38 * p[11];
    constexpr double background = 0.12;
    const double nose_tone = skin - 0.32;
    constexpr double brow_tone = 0.22;
    constexpr double mouth_hh = 0.16;
    constexpr double mouth_y = 0.45;

    const double su = nu.shift_x * 2.0 / static_cast<double>(kImageSize);
    const double sv = nu.shift_y * 2.0 / static_cast<double>(kImageSize);

    Image im(kImageSize, kImageSize);
    for (std::size_t y = 0; y < kImageSize; ++y) {
        for (std::size_t x = 0; x < kImageSize; ++x) {
            const double u = (static_cast<double>(x) + 0.5) / 16.0 - 1.0 - su;
            const double v = (static_cast<double>(y) + 0.5) / 16.0 - 1.0 - sv;
            double val = background;
            using detail::bar_sd;
            using detail::blend;
            using detail::coverage;
            using detail::ellipse_sd;

            blend(val, skin, coverage(ellipse_sd(u, v, 0.0, 0.0, face_rx, face_ry)));
            // brows
            blend(val, brow_tone,
                  coverage(bar_sd(u, v, -eye_dx, eye_y - brow_dy, eye_r + 0.05, 0.07)));
            blend(val, brow_tone,
                  coverage(bar_sd(u, v, eye_dx, eye_y - brow_dy, eye_r + 0.05, 0.07)));
            // eyes
            blend(val, eye_tone, coverage(ellipse_sd(u, v, -eye_dx, eye_y, eye_r, eye_r * 0.8)));
            blend(val, eye_tone, coverage(ellipse_sd(u, v, eye_dx, eye_y, eye_r, eye_r * 0.8)));
            // nose: vertical bar from just below eye level
            blend(val, nose_tone,
                  coverage(bar_sd(u, v, 0.0, -0.02 + nose_len / 2.0, 0.13, nose_len / 2.0)));
            // mouth: horizontal bar with a quadratic vertical warp
            {
                const double rel = mouth_hw > 1e-9 ? (u / mouth_hw) : 0.0;
                const double warped_v = v - mouth_curve * rel * rel * 0.5;
                blend(val, mouth_tone,
                      coverage(bar_sd(u, warped_v, 0.0, mouth_y, mouth_hw, mouth_hh)));
            }
            im.at(y, x) = val;
        }
    }

    for (auto& px : im.px) px += nu.brightness;
    if (nu.noise_sigma > 0.0) {
        Rng rng = make_rng(seed);
        std::normal_distribution<double> gauss(0.0, nu.noise_sigma);
        for (auto& px : im.px) px += gauss(rng);
    }
    im.clamp01();
    return im;
}

inline Dataset generate_dataset(std::size_t n_identities, std::size_t images_per_identity,
                                double train_fraction, std::uint64_t seed) {
    if (n_identities < 4) {
        throw ArgumentError("generate_dataset: need at least 4 identities");
    }
    if (images_per_identity < 2) {
        throw ArgumentError("generate_dataset: every identity needs at least 2 images");
    }
    const auto n_train = static_cast<std::size_t>(
        std::llround(train_fraction * static_cast<double>(n_identities)));
    if (n_train < 2 || n_train >= n_identities) {
        throw ArgumentError(
            "generate_dataset: train fraction must leave >=2 train and >=1 validation "
            "identities");
    }

    Dataset ds;
    ds.seed = seed;
    ds.n_identities = n_identities;
    ds.images_per_identity = images_per_identity;
    ds.train_fraction = train_fraction;

    Rng rng = make_rng(mix_seed(seed, "synth-faces"));
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    // Identities are rejection-sampled to a minimum pairwise distance in
    // rendered image space: no two identities are near twins, and pair
    // distances concentrate in a narrow shell.
    constexpr double kMinVisualDistance = 2.8;
    std::vector<Image> portraits;  // zero-nuisance renders of accepted identities
    for (std::size_t i = 0; i < n_identities; ++i) {
        IdentitySpec spec;
        spec.identity_id = static_cast<int>(i);
        Image portrait;
        for (int attempt = 0;; ++attempt) {
            for (auto& p : spec.params) p = unit(rng);
            portrait = render_identity(spec, Nuisance{}, 0);
            double min_dist = 1e300;
            for (const auto& other : portraits) {
                double sq = 0.0;
                for (std::size_t j = 0; j < portrait.numel(); ++j) {
                    const double d = portrait.px[j] - other.px[j];
                    sq += d * d;
                }
                min_dist = std::min(min_dist, std::sqrt(sq));
            }
            if (min_dist >= kMinVisualDistance || attempt >= 10000) break;
        }
        portraits.push_back(std::move(portrait));
        ds.identities.push_back(spec);
        if (i < n_train) {
            ds.train_identity_ids.push_back(spec.identity_id);
        } else {
            ds.validation_identity_ids.push_back(spec.identity_id);
        }
    }

    int record_id = 0;
    for (const auto& spec : ds.identities) {
        const Split split = ds.split_of(spec.identity_id);
        for (std::size_t j = 0; j < images_per_identity; ++j) {
            DatasetRecord rec;
            rec.record_id = record_id++;
            rec.identity_id = spec.identity_id;
            rec.split = split;
            rec.nuisance.shift_x = uniform_in(rng, -2.0, 2.0);
            rec.nuisance.shift_y = uniform_in(rng, -2.0, 2.0);
            rec.nuisance.brightness = uniform_in(rng, -0.1, 0.1);
            rec.nuisance.noise_sigma = uniform_in(rng, 0.0, 0.02);
            rec.noise_seed = rng();
            rec.image = render_identity(spec, rec.nuisance, rec.noise_seed);
            char buf[32];
            std::snprintf(buf, sizeof(buf), "images/img_%06d.pgm", rec.record_id);
            rec.file = buf;
            ds.records.push_back(std::move(rec));
        }
    }
    return ds;
}

inline constexpr const char* kDatasetFormat = "wcmorph/dataset/v1";

inline void save_dataset(const std::string& dir, const Dataset& ds,
                         const std::vector<std::string>& meta = {}) {
    namespace fs = std::filesystem;
    fs::create_directories(fs::path(dir) / "images");
    std::ofstream out(fs::path(dir) / "manifest.txt", std::ios::binary);
    if (!out) throw ArgumentError("dataset: cannot write manifest in " + dir);
    out << kDatasetFormat << "\n";
    for (const auto& m : meta) out << "# " << m << "\n";
    out << "seed=" << ds.seed << "\n";
    out << "n_identities=" << ds.n_identities << "\n";
    out << "images_per_identity=" << ds.images_per_identity << "\n";
    out << "train_fraction=" << fmt_double(ds.train_fraction) << "\n";
    for (const auto& id : ds.identities) {
        out << "identity id=" << id.identity_id << " split=" << split_name(ds.split_of(id.identity_id))
            << " params=";
        for (std::size_t i = 0; i < id.params.size(); ++i) {
            if (i) out << ',';
            out << fmt_double(id.params[i]);
        }
        out << "\n";
    }
    for (const auto& r : ds.records) {
        out << "record id=" << r.record_id << " identity=" << r.identity_id
            << " split=" << split_name(r.split) << " shift_x=" << fmt_double(r.nuisance.shift_x)
            << " shift_y=" << fmt_double(r.nuisance.shift_y)
            << " brightness=" << fmt_double(r.nuisance.brightness)
            << " noise_sigma=" << fmt_double(r.nuisance.noise_sigma)
            << " noise_seed=" << r.noise_seed << " file=" << r.file << "\n";
        save_pgm((fs::path(dir) / r.file).string(), r.image,
                 "identity=" + std::to_string(r.identity_id));
    }
}

namespace detail {

inline std::string field_of(const std::string& line, const std::string& key,
                            const std::string& where) {
    const std::string needle = " " + key + "=";
    auto pos = line.find(needle);
    if (pos == std::string::npos) {
        throw FormatError(where + ": missing field '" + key + "' in: " + line);
    }
    pos += needle.size();
    const auto end = line.find(' ', pos);
    return line.substr(pos, end == std::string::npos ? std::string::npos : end - pos);
}

} // namespace detail

inline Dataset load_dataset(const std::string& dir) {
    namespace fs = std::filesystem;
    const auto manifest = (fs::path(dir) / "manifest.txt").string();
    std::ifstream in(manifest, std::ios::binary);
    if (!in) throw StageDependencyError("missing dataset manifest: " + manifest);
    std::string line;
    if (!std::getline(in, line) || line != kDatasetFormat) {
        throw FormatError(manifest + ": expected format line " + std::string(kDatasetFormat));
    }
    Dataset ds;
    auto scalar = [&](const std::string& l) { return l.substr(l.find('=') + 1); };
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        if (line.rfind("seed=", 0) == 0) {
            ds.seed = std::stoull(scalar(line));
        } else if (line.rfind("n_identities=", 0) == 0) {
            ds.n_identities = std::stoul(scalar(line));
        } else if (line.rfind("images_per_identity=", 0) == 0) {
            ds.images_per_identity = std::stoul(scalar(line));
        } else if (line.rfind("train_fraction=", 0) == 0) {
            ds.train_fraction = std::stod(scalar(line));
        } else if (line.rfind("identity ", 0) == 0) {
            IdentitySpec spec;
            spec.identity_id = std::stoi(detail::field_of(line, "id", manifest));
            const std::string split = detail::field_of(line, "split", manifest);
            std::istringstream ps(detail::field_of(line, "params", manifest));
            std::string tok;
            std::size_t i = 0;
            while (std::getline(ps, tok, ',')) {
                if (i >= spec.params.size()) throw FormatError(manifest + ": too many params");
                spec.params[i++] = std::stod(tok);
            }
            if (i != spec.params.size()) throw FormatError(manifest + ": too few params");
            ds.identities.push_back(spec);
            if (split == "train") {
                ds.train_identity_ids.push_back(spec.identity_id);
            } else if (split == "validation") {
                ds.validation_identity_ids.push_back(spec.identity_id);
            } else {
                throw FormatError(manifest + ": unknown split " + split);
            }
        } else if (line.rfind("record ", 0) == 0) {
            DatasetRecord rec;
            rec.record_id = std::stoi(detail::field_of(line, "id", manifest));
            rec.identity_id = std::stoi(detail::field_of(line, "identity", manifest));
            const std::string split = detail::field_of(line, "split", manifest);
            rec.split = split == "train" ? Split::train : Split::validation;
            rec.nuisance.shift_x = std::stod(detail::field_of(line, "shift_x", manifest));
            rec.nuisance.shift_y = std::stod(detail::field_of(line, "shift_y", manifest));
            rec.nuisance.brightness = std::stod(detail::field_of(line, "brightness", manifest));
            rec.nuisance.noise_sigma = std::stod(detail::field_of(line, "noise_sigma", manifest));
            rec.noise_seed = std::stoull(detail::field_of(line, "noise_seed", manifest));
            rec.file = detail::field_of(line, "file", manifest);
            rec.image = load_pgm((fs::path(dir) / rec.file).string());
            ds.records.push_back(std::move(rec));
        } else {
            throw FormatError(manifest + ": unrecognized line: " + line);
        }
    }
    if (ds.identities.empty() || ds.records.empty()) {
        throw FormatError(manifest + ": no identities or records");
    }
    return ds;
}

// One enrollment image and one held-out probe per identity of the k
// closest validation identity pairs, ranked by the angle between
// identity-mean embeddings under the supplied encoder.
struct MorphPair {
    int pair_id = 0;
    int identity_a = 0;
    int identity_b = 0;
    int enroll_a = 0;  // record ids
    int enroll_b = 0;
    int probe_a = 0;
    int probe_b = 0;
    double mean_angle = 0.0;
};

template <typename EmbedFn>
std::vector<MorphPair> select_morph_pairs(const Dataset& ds, EmbedFn&& embed, std::size_t k) {
    const auto& val_ids = ds.validation_identity_ids;
    if (val_ids.size() < 2) {
        throw ArgumentError("select_morph_pairs: need at least 2 validation identities");
    }
    const std::size_t available = val_ids.size() * (val_ids.size() - 1) / 2;
    if (k == 0 || k > available) {
        throw ArgumentError("select_morph_pairs: requested " + std::to_string(k) + " pairs, " +
                            std::to_string(available) + " available");
    }

    std::vector<std::pair<int, Embedding>> means;
    for (int id : val_ids) {
        const auto recs = ds.records_of_identity(id);
        std::vector<double> sum;
        for (const auto* r : recs) {
            const Embedding e = embed(r->image);
            if (sum.empty()) sum.assign(e.dim(), 0.0);
            for (std::size_t i = 0; i < e.dim(); ++i) sum[i] += e[i];
        }
        means.emplace_back(id, Embedding::normalized(std::move(sum)));
    }

    struct Candidate {
        double angle;
        std::size_t ia, ib;
    };
    std::vector<Candidate> candidates;
    for (std::size_t a = 0; a < means.size(); ++a) {
        for (std::size_t b = a + 1; b < means.size(); ++b) {
            candidates.push_back({angle(means[a].second, means[b].second), a, b});
        }
    }
    std::sort(candidates.begin(), candidates.end(), [&](const Candidate& x, const Candidate& y) {
        if (x.angle != y.angle) return x.angle < y.angle;
        if (means[x.ia].first != means[y.ia].first) return means[x.ia].first < means[y.ia].first;
        return means[x.ib].first < means[y.ib].first;
    });

    auto first_two_records = [&](int identity) {
        const auto recs = ds.records_of_identity(identity);
        if (recs.size() < 2) {
            throw InvariantError("identity " + std::to_string(identity) + " has fewer than 2 images");
        }
        return std::pair<int, int>{recs[0]->record_id, recs[1]->record_id};
    };

    std::vector<MorphPair> out;
    for (std::size_t i = 0; i < k; ++i) {
        const auto& c = candidates[i];
        MorphPair p;
        p.pair_id = static_cast<int>(i);
        p.identity_a = means[c.ia].first;
        p.identity_b = means[c.ib].first;
        const auto [ea, pa] = first_two_records(p.identity_a);
        const auto [eb, pb] = first_two_records(p.identity_b);
        p.enroll_a = ea;
        p.probe_a = pa;
        p.enroll_b = eb;
        p.probe_b = pb;
        p.mean_angle = c.angle;
        out.push_back(p);
    }
    return out;
}

} // namespace wcm
