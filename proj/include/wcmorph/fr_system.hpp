#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "wcmorph/adam.hpp"
#include "wcmorph/autodiff.hpp"
#include "wcmorph/rng.hpp"
#include "wcmorph/sphere.hpp"
#include "wcmorph/synth_faces.hpp"
#include "wcmorph/weights.hpp"

namespace wcm {

// Toy face-recognition encoder f: X -> Z. Three stride-2 conv blocks
// (batch norm, leaky ReLU 0.02), a fully connected projection and an L2
// normalization onto the unit hypersphere. Trained as an identity
// classifier with a normalized-softmax head that is discarded afterwards.

struct FrModel {
    ModelWeights weights;
    int embed_dim = 16;
    int c1 = 8, c2 = 16, c3 = 32;
    int kernel = 5;
    std::string tag;
    std::uint64_t train_seed = 0;
};

struct FrTrainOptions {
    int epochs = 40;
    int batch_size = 64;
    double head_scale = 24.0;   // logit scale of the normalized-softmax head
    double head_margin = 0.25;  // cosine margin on the target class
    bool augment = true;        // re-jitter each sample per epoch (nuisance ranges)
    int c1 = 8, c2 = 16, c3 = 32;
    int kernel = 5;
    int embed_dim = 16;
    std::string role = "white";
};

struct FrTrainResult {
    FrModel model;
    std::vector<double> epoch_loss;
};

namespace detail {

inline const std::vector<std::string>& fr_param_names() {
    static const std::vector<std::string> names{
        "conv1.kernel", "bn1.gamma", "bn1.beta", "conv2.kernel", "bn2.gamma", "bn2.beta",
        "conv3.kernel", "bn3.gamma", "bn3.beta", "fc.weight",
    };
    return names;
}

struct BoundWeights {
    std::vector<std::pair<std::string, Var>> vars;

    const Var& at(const std::string& name) const {
        for (const auto& [n, v] : vars) {
            if (n == name) return v;
        }
        throw ArgumentError("bound weights: no parameter named " + name);
    }
};

inline BoundWeights bind_weights(const ModelWeights& w, const std::vector<std::string>& names,
                                 bool requires_grad) {
    BoundWeights bw;
    for (const auto& name : names) {
        bw.vars.emplace_back(name, Var::leaf(w.at(name), requires_grad));
    }
    return bw;
}

// Encoder trunk for a [batch x 1 x 32 x 32] input. In train mode the
// model's running stats are updated in place; in eval mode they are read
// through local copies so the pass leaves the model untouched.
inline Var fr_trunk(const FrModel& fr, ModelWeights* mutable_w, const BoundWeights& bw,
                    const Var& images, BnMode mode) {
    Tensor local[6];
    auto stats = [&](const char* name, int slot) -> Tensor& {
        if (mode == BnMode::train) return mutable_w->at(name);
        local[slot] = fr.weights.at(name);
        return local[slot];
    };
    Tensor& rm1 = stats("bn1.running_mean", 0);
    Tensor& rv1 = stats("bn1.running_var", 1);
    Tensor& rm2 = stats("bn2.running_mean", 2);
    Tensor& rv2 = stats("bn2.running_var", 3);
    Tensor& rm3 = stats("bn3.running_mean", 4);
    Tensor& rv3 = stats("bn3.running_var", 5);

    const int pad = fr.kernel / 2;
    Var h = conv2d(images, bw.at("conv1.kernel"), 2, pad);
    h = batch_norm(h, bw.at("bn1.gamma"), bw.at("bn1.beta"), rm1, rv1, mode);
    h = leaky_relu(h, 0.02);
    h = conv2d(h, bw.at("conv2.kernel"), 2, pad);
    h = batch_norm(h, bw.at("bn2.gamma"), bw.at("bn2.beta"), rm2, rv2, mode);
    h = leaky_relu(h, 0.02);
    h = conv2d(h, bw.at("conv3.kernel"), 2, pad);
    h = batch_norm(h, bw.at("bn3.gamma"), bw.at("bn3.beta"), rm3, rv3, mode);
    h = leaky_relu(h, 0.02);
    const std::size_t batch = images.value().dim(0);
    const std::size_t flat = static_cast<std::size_t>(fr.c3) * 4 * 4;
    h = reshape(h, {batch, flat});
    h = fully_connected(h, bw.at("fc.weight"));
    return l2_normalize(h);
}

// Differentiable embedding pass through a frozen FR model: gradients flow
// through to the input images but never into the FR weights.
inline Var fr_embed_frozen(const FrModel& fr, const Var& images) {
    BoundWeights bw = bind_weights(fr.weights, fr_param_names(), false);
    return fr_trunk(fr, nullptr, bw, images, BnMode::eval);
}

inline Tensor stack_images(const std::vector<const Image*>& images) {
    const std::size_t n = images.size();
    Tensor batch({n, 1, kImageSize, kImageSize});
    for (std::size_t i = 0; i < n; ++i) {
        std::copy(images[i]->px.begin(), images[i]->px.end(),
                  batch.data() + i * kImageSize * kImageSize);
    }
    return batch;
}

} // namespace detail

inline FrTrainResult train_fr(const Dataset& ds, const FrTrainOptions& opt, std::uint64_t seed) {
    if (ds.train_identity_ids.size() < 2) {
        throw ArgumentError("train_fr: need at least 2 training identities");
    }
    if (opt.batch_size < 2) throw ArgumentError("train_fr: batch size must be >= 2");

    // class index per train identity, in sorted identity order
    std::vector<int> class_ids = ds.train_identity_ids;
    std::sort(class_ids.begin(), class_ids.end());
    std::map<int, int> class_of;
    for (std::size_t i = 0; i < class_ids.size(); ++i) class_of[class_ids[i]] = static_cast<int>(i);
    const std::size_t n_classes = class_ids.size();

    FrModel fr;
    fr.embed_dim = opt.embed_dim;
    fr.c1 = opt.c1;
    fr.c2 = opt.c2;
    fr.c3 = opt.c3;
    fr.kernel = opt.kernel;
    fr.train_seed = seed;
    fr.tag = "fr-" + opt.role + "-c" + std::to_string(opt.c1) + "x" + std::to_string(opt.c2) +
             "x" + std::to_string(opt.c3) + "k" + std::to_string(opt.kernel) + "-d" +
             std::to_string(opt.embed_dim) + "-seed" + std::to_string(seed);

    Rng rng = make_rng(mix_seed(seed, "train-fr"));
    ModelWeights& w = fr.weights;
    auto gauss_param = [&](const std::string& name, Shape shape) {
        Tensor t(std::move(shape));
        fill_gaussian(t, 0.0, 0.01, rng);
        w.add(name, std::move(t));
    };
    auto bn_param = [&](const std::string& prefix, std::size_t c) {
        w.add(prefix + ".gamma", Tensor::full({c}, 1.0));
        w.add(prefix + ".beta", Tensor({c}));
        w.add(prefix + ".running_mean", Tensor({c}));
        w.add(prefix + ".running_var", Tensor::full({c}, 1.0));
    };
    const auto c1 = static_cast<std::size_t>(opt.c1);
    const auto c2 = static_cast<std::size_t>(opt.c2);
    const auto c3 = static_cast<std::size_t>(opt.c3);
    const auto k = static_cast<std::size_t>(opt.kernel);
    const auto d = static_cast<std::size_t>(opt.embed_dim);
    gauss_param("conv1.kernel", {c1, 1, k, k});
    bn_param("bn1", c1);
    gauss_param("conv2.kernel", {c2, c1, k, k});
    bn_param("bn2", c2);
    gauss_param("conv3.kernel", {c3, c2, k, k});
    bn_param("bn3", c3);
    gauss_param("fc.weight", {d, c3 * 4 * 4});
    gauss_param("head.weight", {n_classes, d});

    std::vector<std::string> trainable = detail::fr_param_names();
    trainable.push_back("head.weight");

    const auto train_records = ds.records_in(Split::train);
    std::vector<std::size_t> order(train_records.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    AdamState adam;
    std::vector<double> epoch_loss;
    for (int epoch = 0; epoch < opt.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        double loss_sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < order.size();
             start += static_cast<std::size_t>(opt.batch_size)) {
            const std::size_t end =
                std::min(order.size(), start + static_cast<std::size_t>(opt.batch_size));
            if (end - start < 2) continue;  // batch norm needs >= 2 samples
            std::vector<Image> augmented;
            std::vector<const Image*> images;
            std::vector<int> labels;
            augmented.reserve(end - start);
            for (std::size_t i = start; i < end; ++i) {
                const auto* rec = train_records[order[i]];
                if (opt.augment) {
                    Image im = shift_bilinear(rec->image, uniform_in(rng, -2.0, 2.0),
                                              uniform_in(rng, -2.0, 2.0));
                    const double bright = uniform_in(rng, -0.1, 0.1);
                    std::normal_distribution<double> gauss(0.0, uniform_in(rng, 0.0, 0.02));
                    for (auto& px : im.px) px += bright + gauss(rng);
                    im.clamp01();
                    augmented.push_back(std::move(im));
                    images.push_back(&augmented.back());
                } else {
                    images.push_back(&rec->image);
                }
                labels.push_back(class_of.at(rec->identity_id));
            }
            detail::BoundWeights bw = detail::bind_weights(w, trainable, true);
            Var emb = detail::fr_trunk(fr, &w, bw, Var::constant(detail::stack_images(images)),
                                       BnMode::train);
            Var head_dirs = l2_normalize(bw.at("head.weight"));
            Var cosines = fully_connected(emb, head_dirs);
            // large-margin cosine loss: the target class must win by the margin
            Tensor margin_mask({labels.size(), n_classes});
            for (std::size_t i = 0; i < labels.size(); ++i) {
                margin_mask[i * n_classes + static_cast<std::size_t>(labels[i])] =
                    -opt.head_margin;
            }
            Var logits = scale(add(cosines, Var::constant(margin_mask)), opt.head_scale);
            Var loss = softmax_cross_entropy(logits, labels);
            backward(loss);

            std::vector<Tensor*> params;
            std::vector<const Tensor*> grads;
            for (const auto& [name, var] : bw.vars) {
                params.push_back(&w.at(name));
                grads.push_back(&var.node()->grad);
            }
            adam_step(params, grads, adam);
            loss_sum += loss.value()[0];
            ++batches;
        }
        epoch_loss.push_back(batches ? loss_sum / static_cast<double>(batches) : 0.0);
    }

    // the classifier head is a training aid only
    ModelWeights final_w;
    final_w.seed = seed;
    for (auto& [name, t] : w.entries) {
        if (name != "head.weight") final_w.add(name, t);
    }
    final_w.set_hyper("arch", fr.tag);
    final_w.set_hyper("role", opt.role);
    final_w.set_hyper("embed_dim", std::to_string(opt.embed_dim));
    final_w.set_hyper("c1", std::to_string(opt.c1));
    final_w.set_hyper("c2", std::to_string(opt.c2));
    final_w.set_hyper("c3", std::to_string(opt.c3));
    final_w.set_hyper("kernel", std::to_string(opt.kernel));
    final_w.set_hyper("epochs", std::to_string(opt.epochs));
    final_w.set_hyper("batch_size", std::to_string(opt.batch_size));
    final_w.set_hyper("head_scale", fmt_double(opt.head_scale));
    final_w.set_hyper("head_margin", fmt_double(opt.head_margin));
    final_w.set_hyper("adam", "alpha=0.0001 beta1=0 beta2=0.9 eps=1e-08");
    fr.weights = std::move(final_w);
    return FrTrainResult{std::move(fr), std::move(epoch_loss)};
}

inline FrModel fr_from_weights(ModelWeights w) {
    FrModel fr;
    fr.embed_dim = std::stoi(w.hyper("embed_dim", "16"));
    fr.c1 = std::stoi(w.hyper("c1", "8"));
    fr.c2 = std::stoi(w.hyper("c2", "16"));
    fr.c3 = std::stoi(w.hyper("c3", "32"));
    fr.kernel = std::stoi(w.hyper("kernel", "5"));
    fr.tag = w.hyper("arch", "fr-unknown");
    fr.train_seed = w.seed;
    fr.weights = std::move(w);
    return fr;
}

inline std::vector<Embedding> embed_batch(const FrModel& fr,
                                          const std::vector<const Image*>& images) {
    std::vector<Embedding> out;
    out.reserve(images.size());
    constexpr std::size_t kChunk = 64;
    for (std::size_t start = 0; start < images.size(); start += kChunk) {
        const std::size_t end = std::min(images.size(), start + kChunk);
        std::vector<const Image*> chunk(images.begin() + start, images.begin() + end);
        detail::BoundWeights bw = detail::bind_weights(fr.weights, detail::fr_param_names(), false);
        Var emb = detail::fr_trunk(fr, nullptr, bw, Var::constant(detail::stack_images(chunk)),
                                   BnMode::eval);
        const Tensor& v = emb.value();
        const std::size_t dim = v.dim(1);
        for (std::size_t i = 0; i < chunk.size(); ++i) {
            std::vector<double> row(v.data() + i * dim, v.data() + (i + 1) * dim);
            out.push_back(Embedding::unit(std::move(row)));
        }
    }
    return out;
}

inline Embedding embed(const FrModel& fr, const Image& image) {
    if (image.height != kImageSize || image.width != kImageSize) {
        throw DimensionError("embed: image must be " + std::to_string(kImageSize) + "x" +
                             std::to_string(kImageSize));
    }
    return embed_batch(fr, {&image}).front();
}

struct DecisionThreshold {
    double t = 0.0;
    double fmr_at_t = 0.0;
    double fnmr_at_t = 0.0;
    std::string calibration_id;
};

struct VerifyResult {
    bool match = false;
    double theta = 0.0;
};

// Match iff theta <= t (the boundary counts as a match).
inline VerifyResult verify(const FrModel& fr, const Image& a, const Image& b,
                           const DecisionThreshold& t) {
    const double theta = angle(embed(fr, a), embed(fr, b));
    return VerifyResult{theta <= t.t, theta};
}

struct ScoreSets {
    std::vector<double> genuine;
    std::vector<double> impostor;
};

inline constexpr std::size_t kImpostorCap = 20000;

// All within-identity validation pair angles, and the cross-identity pair
// angles (a seeded subsample when there are more than kImpostorCap).
inline ScoreSets score_sets(const FrModel& fr, const Dataset& ds) {
    const auto records = ds.records_in(Split::validation);
    std::vector<const Image*> images;
    images.reserve(records.size());
    for (const auto* r : records) images.push_back(&r->image);
    const auto embeddings = embed_batch(fr, images);

    ScoreSets out;
    std::vector<std::pair<std::size_t, std::size_t>> impostor_pairs;
    for (std::size_t i = 0; i < records.size(); ++i) {
        for (std::size_t j = i + 1; j < records.size(); ++j) {
            if (records[i]->identity_id == records[j]->identity_id) {
                out.genuine.push_back(angle(embeddings[i], embeddings[j]));
            } else {
                impostor_pairs.emplace_back(i, j);
            }
        }
    }
    if (out.genuine.empty()) {
        throw ArgumentError("score_sets: no genuine pairs in the validation split");
    }
    if (impostor_pairs.size() > kImpostorCap) {
        // deterministic subsample tied to the model's seed
        Rng rng = make_rng(mix_seed(fr.train_seed, "impostor-sample"));
        std::shuffle(impostor_pairs.begin(), impostor_pairs.end(), rng);
        impostor_pairs.resize(kImpostorCap);
    }
    for (const auto& [i, j] : impostor_pairs) {
        out.impostor.push_back(angle(embeddings[i], embeddings[j]));
    }
    return out;
}

inline double fmr_at(const std::vector<double>& impostor_sorted, double t) {
    const auto it = std::upper_bound(impostor_sorted.begin(), impostor_sorted.end(), t);
    return static_cast<double>(it - impostor_sorted.begin()) /
           static_cast<double>(impostor_sorted.size());
}

inline double fnmr_at(const std::vector<double>& genuine_sorted, double t) {
    const auto it = std::upper_bound(genuine_sorted.begin(), genuine_sorted.end(), t);
    return static_cast<double>(genuine_sorted.end() - it) /
           static_cast<double>(genuine_sorted.size());
}

// Largest candidate threshold with FMR(t) < 0.1%; candidates sweep the
// sorted impostor angles, the midpoints between consecutive ones, and the
// genuine angles (so FNMR is minimal among feasible thresholds).
inline DecisionThreshold calibrate_threshold(const std::vector<double>& genuine,
                                             const std::vector<double>& impostor) {
    if (genuine.empty() || impostor.empty()) {
        throw ArgumentError("calibrate_threshold: empty score set");
    }
    std::vector<double> gen = genuine, imp = impostor;
    std::sort(gen.begin(), gen.end());
    std::sort(imp.begin(), imp.end());

    std::vector<double> candidates;
    candidates.push_back(-1e-9);  // always-feasible fallback: reject everything
    double prev = 0.0;
    for (double a : imp) {
        candidates.push_back((prev + a) / 2.0);
        candidates.push_back(a);
        prev = a;
    }
    for (double g : gen) candidates.push_back(g);

    DecisionThreshold best;
    best.t = -1e9;
    for (double t : candidates) {
        if (fmr_at(imp, t) < 0.001 && t > best.t) best.t = t;
    }
    best.fmr_at_t = fmr_at(imp, best.t);
    best.fnmr_at_t = fnmr_at(gen, best.t);
    best.calibration_id = "fmr<0.001 over " + std::to_string(imp.size()) + " impostor / " +
                          std::to_string(gen.size()) + " genuine scores";
    return best;
}

// Crossing point of FMR(t) and FNMR(t), as min over candidates of the
// larger of the two rates.
inline double equal_error_rate(const std::vector<double>& genuine,
                               const std::vector<double>& impostor) {
    if (genuine.empty() || impostor.empty()) {
        throw ArgumentError("equal_error_rate: empty score set");
    }
    std::vector<double> gen = genuine, imp = impostor;
    std::sort(gen.begin(), gen.end());
    std::sort(imp.begin(), imp.end());
    std::vector<double> candidates{-1e-9};
    candidates.insert(candidates.end(), gen.begin(), gen.end());
    candidates.insert(candidates.end(), imp.begin(), imp.end());
    double best = 1.0;
    for (double t : candidates) {
        best = std::min(best, std::max(fmr_at(imp, t), fnmr_at(gen, t)));
    }
    return best;
}

inline std::vector<MorphPair> select_morph_pairs(const Dataset& ds, const FrModel& fr,
                                                 std::size_t k) {
    return select_morph_pairs(ds, [&fr](const Image& im) { return embed(fr, im); }, k);
}

} // namespace wcm
