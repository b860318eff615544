#pragma once

// Training: the attention (BCE) loss, cosine triplet loss and their weighted
// combination, frequency-based head assignment, uniform triplet mining, and
// the epoch loop with validation curves, best-checkpoint retention and
// divergence detection.

#include <atomic>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "neuropapyri/batching.hpp"

namespace npap {

// ---------------------------------------------------------------------------
// Loss weights (w1: attention loss, w2: target loss; w1 + w2 = 1)
// ---------------------------------------------------------------------------

struct LossWeights {
    double w1 = 0.5;
    double w2 = 0.5;

    void validate() const {
        if (w1 < 0.0 || w2 < 0.0) throw InvalidWeightsError("loss weights must be non-negative");
        if (std::abs(w1 + w2 - 1.0) > 1e-9)
            throw InvalidWeightsError(strf("loss weights must sum to 1 (got %.12f)", w1 + w2));
    }
};

// Call counter so tests can audit scheme gating.
inline std::atomic<int64_t>& combined_loss_calls() {
    static std::atomic<int64_t> calls{0};
    return calls;
}

inline double combined_loss(double loss_a, double loss_t, const LossWeights& w) {
    w.validate();
    ++combined_loss_calls();
    return w.w1 * loss_a + w.w2 * loss_t;
}

// ---------------------------------------------------------------------------
// Scalar loss evaluators (the non-autograd route; tests pit these against
// the autograd ops and both against brute-force oracles)
// ---------------------------------------------------------------------------

// Mean stable BCE on logits over all B*N entries.
template <class T>
double attention_loss(const Tensor<T>& logits, const Tensor<T>& labels) {
    if (!logits.same_shape(labels)) throw ShapeMismatchError("attention_loss: shape mismatch");
    if (logits.numel() == 0) throw ShapeMismatchError("attention_loss: empty input");
    double sum = 0.0;
    for (int64_t i = 0; i < logits.numel(); ++i) {
        const double z = logits[i], y = labels[i];
        sum += std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
    }
    return sum / static_cast<double>(logits.numel());
}

template <class T>
double cosine_distance(std::span<const T> u, std::span<const T> v) {
    if (u.size() != v.size() || u.empty()) throw ShapeMismatchError("cosine_distance: size mismatch");
    double dot = 0.0, nu = 0.0, nv = 0.0;
    for (size_t i = 0; i < u.size(); ++i) {
        dot += static_cast<double>(u[i]) * v[i];
        nu += static_cast<double>(u[i]) * u[i];
        nv += static_cast<double>(v[i]) * v[i];
    }
    if (nu == 0.0 || nv == 0.0) throw ZeroVectorError("cosine_distance: zero vector");
    return 1.0 - dot / (std::sqrt(nu) * std::sqrt(nv));
}

template <class T>
double triplet_loss(std::span<const T> a, std::span<const T> p, std::span<const T> n, double margin) {
    if (margin < 0.0) throw InvalidWeightsError("triplet_loss: margin must be >= 0");
    return std::max(0.0, cosine_distance(a, p) - cosine_distance(a, n) + margin);
}

// ---------------------------------------------------------------------------
// Head assignment: the n most frequent letters, ties broken alphabetically,
// head order = descending frequency.
// ---------------------------------------------------------------------------

inline std::vector<int> assign_heads(const std::vector<LineSample>& train, int n_heads) {
    if (n_heads < 1 || n_heads > greek::kNumLetters)
        throw ConfigError(strf("assign_heads: n_heads must be in [1,%d]", greek::kNumLetters));
    const auto hist = char_distribution(train);
    std::vector<int> order(greek::kNumLetters);
    for (int k = 0; k < greek::kNumLetters; ++k) order[static_cast<size_t>(k)] = k;
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        if (hist[static_cast<size_t>(a)] != hist[static_cast<size_t>(b)])
            return hist[static_cast<size_t>(a)] > hist[static_cast<size_t>(b)];
        return a < b;
    });
    order.resize(static_cast<size_t>(n_heads));
    return order;
}

// ---------------------------------------------------------------------------
// Triplet mining: uniform anchors over documents with >= 2 lines, positive
// from the same document (never the anchor), negative from another document.
// ---------------------------------------------------------------------------

struct TripletBatch {
    std::vector<size_t> anchors, positives, negatives;
    size_t size() const { return anchors.size(); }
};

inline TripletBatch sample_triplets(const std::vector<LineSample>& samples, int batch_size, Rng& rng) {
    std::map<std::string, std::vector<size_t>> by_doc;
    for (size_t i = 0; i < samples.size(); ++i) by_doc[samples[i].document_id].push_back(i);
    if (by_doc.size() < 2)
        throw InsufficientDocumentsError("triplet sampling needs >= 2 documents");
    std::vector<size_t> eligible;  // lines whose document has >= 2 lines
    for (const auto& [doc, idxs] : by_doc)
        if (idxs.size() >= 2) eligible.insert(eligible.end(), idxs.begin(), idxs.end());
    if (eligible.empty())
        throw InsufficientDocumentsError("triplet sampling needs a document with >= 2 lines");

    TripletBatch batch;
    for (int b = 0; b < batch_size; ++b) {
        const size_t anchor = eligible[rng.below(eligible.size())];
        const auto& doc_lines = by_doc[samples[anchor].document_id];
        size_t pos;
        const uint64_t rp = rng.below(doc_lines.size() - 1);
        pos = doc_lines[rp] == anchor ? doc_lines[doc_lines.size() - 1] : doc_lines[rp];
        const size_t n_others = samples.size() - doc_lines.size();
        if (n_others == 0) throw InsufficientDocumentsError("no negative candidates");
        uint64_t rn = rng.below(n_others);
        size_t neg = samples.size();
        for (const auto& [doc, idxs] : by_doc) {
            if (doc == samples[anchor].document_id) continue;
            if (rn < idxs.size()) {
                neg = idxs[rn];
                break;
            }
            rn -= idxs.size();
        }
        batch.anchors.push_back(anchor);
        batch.positives.push_back(pos);
        batch.negatives.push_back(neg);
    }
    return batch;
}

// ---------------------------------------------------------------------------
// Train configuration and loss curves
// ---------------------------------------------------------------------------

enum class Scheme { AttentionOnly, TripletOnly, Dual, DocClassifier };

inline std::string scheme_name(Scheme s) {
    switch (s) {
        case Scheme::AttentionOnly: return "attention-only";
        case Scheme::TripletOnly: return "triplet-only";
        case Scheme::Dual: return "dual";
        case Scheme::DocClassifier: return "doc-classifier";
    }
    return "?";
}

inline Scheme scheme_from_name(const std::string& s) {
    if (s == "attention-only") return Scheme::AttentionOnly;
    if (s == "triplet-only") return Scheme::TripletOnly;
    if (s == "dual") return Scheme::Dual;
    if (s == "doc-classifier") return Scheme::DocClassifier;
    throw ConfigError("unknown training scheme '" + s + "'");
}

struct TrainConfig {
    Scheme scheme = Scheme::AttentionOnly;
    double learning_rate = 5e-5;
    int batch_size = 16;
    int max_epochs = 10;
    double margin = 0.2;          // cosine-distance triplet margin
    LossWeights weights;          // dual scheme only
    double augment_rate = 0.0;
    uint64_t seed = 0;
    double val_fraction = 0.1;    // document-stratified validation share
    int steps_per_epoch = 0;      // triplet schemes; 0 = ceil(n_train / batch_size)
    double adam_beta1 = 0.9, adam_beta2 = 0.999, adam_eps = 1e-8;

    void validate() const {
        if (learning_rate <= 0.0) throw ConfigError("learning_rate must be > 0");
        if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
        if (max_epochs < 0) throw ConfigError("max_epochs must be >= 0");
        if (margin < 0.0) throw ConfigError("margin must be >= 0");
        if (augment_rate < 0.0 || augment_rate > 1.0) throw ConfigError("augment_rate must be in [0,1]");
        if (val_fraction < 0.0 || val_fraction >= 1.0) throw ConfigError("val_fraction must be in [0,1)");
        if (scheme == Scheme::Dual) weights.validate();
    }
};

struct CurveRow {
    int epoch;          // 1-based; 0 is the pre-training state
    std::string split;  // train | val
    std::string name;   // attention | triplet | combined | class_ce
    double value;
};

inline void write_curves_csv(const std::string& path, const std::vector<CurveRow>& rows) {
    std::filesystem::path p(path);
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    std::ofstream out(path);
    if (!out) throw IoError("cannot write curves: " + path);
    out << "epoch,split,loss_name,value\n";
    for (const auto& r : rows)
        out << r.epoch << "," << r.split << "," << r.name << "," << strf("%.9g", r.value) << "\n";
}

struct TrainResult {
    std::vector<CurveRow> curves;
    bool diverged = false;
    int best_epoch = 0;  // 0 = initialization
    double best_val = std::numeric_limits<double>::infinity();
    int epochs_run = 0;
};

// ---------------------------------------------------------------------------
// The training loop
// ---------------------------------------------------------------------------

namespace detail {

template <class T>
double eval_attention_bce(NeuroPapyri<T>& model, const std::vector<LineSample>& set,
                          const std::vector<int>& head_letters, int batch_size) {
    if (set.empty()) return std::numeric_limits<double>::quiet_NaN();
    auto logits = collect_presence_logits(model, set, batch_size);
    std::vector<size_t> all(set.size());
    for (size_t i = 0; i < all.size(); ++i) all[i] = i;
    auto labels = presence_labels<T>(set, all, head_letters);
    return attention_loss(logits, labels);
}

template <class T>
double eval_triplet(NeuroPapyri<T>& model, const std::vector<LineSample>& set,
                    const TripletBatch& triplets, double margin, int batch_size) {
    if (triplets.size() == 0) return std::numeric_limits<double>::quiet_NaN();
    ag::NoGradGuard ng;
    const bool was_training = model.is_training();
    model.set_training(false);
    const auto& cfg = model.config();
    double sum = 0.0;
    const size_t n = triplets.size();
    for (size_t start = 0; start < n; start += static_cast<size_t>(batch_size)) {
        const size_t end = std::min(n, start + static_cast<size_t>(batch_size));
        std::vector<size_t> ia(triplets.anchors.begin() + start, triplets.anchors.begin() + end);
        std::vector<size_t> ip(triplets.positives.begin() + start, triplets.positives.begin() + end);
        std::vector<size_t> in(triplets.negatives.begin() + start, triplets.negatives.begin() + end);
        auto ea = model.forward(Var<T>::constant(make_batch<T>(set, ia, cfg.input_h, cfg.input_w))).embedding;
        auto ep = model.forward(Var<T>::constant(make_batch<T>(set, ip, cfg.input_h, cfg.input_w))).embedding;
        auto en = model.forward(Var<T>::constant(make_batch<T>(set, in, cfg.input_h, cfg.input_w))).embedding;
        auto l = ag::triplet_cosine_loss(ea, ep, en, static_cast<T>(margin));
        sum += static_cast<double>(l.value()[0]) * static_cast<double>(end - start);
    }
    model.set_training(was_training);
    return sum / static_cast<double>(n);
}

}  // namespace detail

template <class T>
TrainResult train(NeuroPapyri<T>& model, const std::vector<LineSample>& data, const TrainConfig& cfg) {
    cfg.validate();
    if (data.empty()) throw DataError("train: no samples");
    const auto& mc = model.config();
    const bool wants_attention = cfg.scheme == Scheme::AttentionOnly || cfg.scheme == Scheme::Dual;
    const bool wants_triplet = cfg.scheme == Scheme::TripletOnly || cfg.scheme == Scheme::Dual;
    if (wants_attention) {
        if (mc.variant != "full") throw ConfigError("attention supervision needs the full variant");
        if (mc.head_letters.empty())
            throw ConfigError("attention supervision needs head_letters in the model config");
    }
    if (cfg.scheme == Scheme::DocClassifier && mc.variant != "classifier")
        throw ConfigError("doc-classifier scheme needs the classifier variant");

    Rng master(cfg.seed);

    // Validation split (document-stratified).
    std::vector<LineSample> tr = data, val;
    if (cfg.val_fraction > 0.0 && data.size() >= 4) {
        auto parts = split_dataset(data, 1.0 - cfg.val_fraction, master.child(0xDA1DULL).seed());
        tr = std::move(parts.first);
        val = std::move(parts.second);
    }

    // Document class labels for the classifier baseline.
    std::map<std::string, int> doc_class;
    if (cfg.scheme == Scheme::DocClassifier) {
        for (const auto& s : data) doc_class.emplace(s.document_id, 0);
        int next = 0;
        for (auto& [doc, c] : doc_class) c = next++;
        if (static_cast<int>(doc_class.size()) != mc.n_classes)
            throw ConfigError(strf("classifier variant has n_classes=%d but data has %zu documents",
                                   mc.n_classes, doc_class.size()));
    }

    // Fixed validation probes: one triplet batch reused every epoch so the
    // curve is comparable across epochs.
    TripletBatch val_triplets;
    if (wants_triplet && !val.empty()) {
        try {
            Rng r = master.child(0x7A1ULL);
            val_triplets = sample_triplets(val, std::min<int>(64, static_cast<int>(val.size())), r);
        } catch (const InsufficientDocumentsError&) {
            val_triplets = {};
        }
    }

    auto params = model.trainable_params();
    nn::Adam<T> opt(params, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);

    TrainResult res;
    auto best_state = model.state_dict();
    res.best_epoch = 0;
    res.best_val = std::numeric_limits<double>::infinity();

    auto finite = [](double v) { return std::isfinite(v); };

    for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        model.set_training(true);
        double tr_att = 0.0, tr_trip = 0.0, tr_ce = 0.0;
        int64_t att_n = 0, trip_n = 0, ce_n = 0;
        bool blew_up = false;

        if (cfg.scheme == Scheme::AttentionOnly || cfg.scheme == Scheme::DocClassifier) {
            std::vector<size_t> order(tr.size());
            for (size_t i = 0; i < order.size(); ++i) order[i] = i;
            Rng erng = master.child(mix64(0xE60C4ULL, static_cast<uint64_t>(epoch)));
            erng.shuffle(order);
            for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.batch_size)) {
                const size_t end = std::min(order.size(), start + static_cast<size_t>(cfg.batch_size));
                std::vector<size_t> idx(order.begin() + start, order.begin() + end);
                auto x = Var<T>::constant(make_batch<T>(tr, idx, mc.input_h, mc.input_w,
                                                        cfg.augment_rate, &master, epoch));
                auto out = model.forward(x);
                Var<T> loss;
                if (cfg.scheme == Scheme::AttentionOnly) {
                    auto labels = presence_labels<T>(tr, idx, mc.head_letters);
                    loss = ag::bce_with_logits(out.presence_logits, labels);
                    tr_att += static_cast<double>(loss.value()[0]) * static_cast<double>(idx.size());
                    att_n += static_cast<int64_t>(idx.size());
                } else {
                    std::vector<int> labels;
                    for (size_t i : idx) labels.push_back(doc_class.at(tr[i].document_id));
                    loss = ag::softmax_cross_entropy(out.class_logits, labels);
                    tr_ce += static_cast<double>(loss.value()[0]) * static_cast<double>(idx.size());
                    ce_n += static_cast<int64_t>(idx.size());
                }
                if (!finite(loss.value()[0])) {
                    blew_up = true;
                    break;
                }
                opt.zero_grad();
                ag::backward(loss);
                opt.step();
            }
        } else {
            const int steps = cfg.steps_per_epoch > 0
                                  ? cfg.steps_per_epoch
                                  : static_cast<int>((tr.size() + cfg.batch_size - 1) /
                                                     static_cast<size_t>(cfg.batch_size));
            for (int step = 0; step < steps; ++step) {
                Rng srng = master.child(mix64(0x57E9ULL + static_cast<uint64_t>(epoch),
                                              static_cast<uint64_t>(step)));
                auto trip = sample_triplets(tr, cfg.batch_size, srng);
                auto xa = Var<T>::constant(make_batch<T>(tr, trip.anchors, mc.input_h, mc.input_w,
                                                         cfg.augment_rate, &master, epoch));
                auto xp = Var<T>::constant(make_batch<T>(tr, trip.positives, mc.input_h, mc.input_w,
                                                         cfg.augment_rate, &master, epoch));
                auto xn = Var<T>::constant(make_batch<T>(tr, trip.negatives, mc.input_h, mc.input_w,
                                                         cfg.augment_rate, &master, epoch));
                auto oa = model.forward(xa);
                auto op = model.forward(xp);
                auto on = model.forward(xn);
                Var<T> ltrip = ag::triplet_cosine_loss(oa.embedding, op.embedding, on.embedding,
                                                       static_cast<T>(cfg.margin));
                Var<T> loss = ltrip;
                double att_value = 0.0;
                if (cfg.scheme == Scheme::Dual) {
                    auto la = presence_labels<T>(tr, trip.anchors, mc.head_letters);
                    auto lp = presence_labels<T>(tr, trip.positives, mc.head_letters);
                    auto ln = presence_labels<T>(tr, trip.negatives, mc.head_letters);
                    Var<T> bce = ag::scale(
                        ag::add(ag::add(ag::bce_with_logits(oa.presence_logits, la),
                                        ag::bce_with_logits(op.presence_logits, lp)),
                                ag::bce_with_logits(on.presence_logits, ln)),
                        T(1) / T(3));
                    att_value = bce.value()[0];
                    loss = ag::axpby(static_cast<T>(cfg.weights.w1), bce,
                                     static_cast<T>(cfg.weights.w2), ltrip);
                    tr_att += att_value * static_cast<double>(trip.size());
                    att_n += static_cast<int64_t>(trip.size());
                }
                tr_trip += static_cast<double>(ltrip.value()[0]) * static_cast<double>(trip.size());
                trip_n += static_cast<int64_t>(trip.size());
                if (!finite(loss.value()[0])) {
                    blew_up = true;
                    break;
                }
                opt.zero_grad();
                ag::backward(loss);
                opt.step();
            }
        }

        // Epoch summary rows (train).
        if (att_n > 0) res.curves.push_back({epoch, "train", "attention", tr_att / att_n});
        if (trip_n > 0) res.curves.push_back({epoch, "train", "triplet", tr_trip / trip_n});
        if (ce_n > 0) res.curves.push_back({epoch, "train", "class_ce", tr_ce / ce_n});
        if (cfg.scheme == Scheme::Dual && att_n > 0 && trip_n > 0)
            res.curves.push_back({epoch, "train", "combined",
                                  combined_loss(tr_att / att_n, tr_trip / trip_n, cfg.weights)});

        // Validation.
        double val_metric = std::numeric_limits<double>::quiet_NaN();
        if (!val.empty()) {
            double v_att = std::numeric_limits<double>::quiet_NaN();
            double v_trip = std::numeric_limits<double>::quiet_NaN();
            if (wants_attention) {
                v_att = detail::eval_attention_bce(model, val, mc.head_letters, cfg.batch_size);
                res.curves.push_back({epoch, "val", "attention", v_att});
            }
            if (wants_triplet && val_triplets.size() > 0) {
                v_trip = detail::eval_triplet(model, val, val_triplets, cfg.margin, cfg.batch_size);
                res.curves.push_back({epoch, "val", "triplet", v_trip});
            }
            if (cfg.scheme == Scheme::DocClassifier) {
                // Classifier validation reuses the train objective on the held-out lines.
                ag::NoGradGuard ng;
                model.set_training(false);
                std::vector<size_t> all(val.size());
                for (size_t i = 0; i < all.size(); ++i) all[i] = i;
                auto x = Var<T>::constant(make_batch<T>(val, all, mc.input_h, mc.input_w));
                std::vector<int> labels;
                for (const auto& s : val) labels.push_back(doc_class.at(s.document_id));
                auto out = model.forward(x);
                val_metric = ag::softmax_cross_entropy(out.class_logits, labels).value()[0];
                res.curves.push_back({epoch, "val", "class_ce", val_metric});
            } else if (cfg.scheme == Scheme::AttentionOnly) {
                val_metric = v_att;
            } else if (cfg.scheme == Scheme::TripletOnly) {
                val_metric = std::isnan(v_trip) ? std::numeric_limits<double>::quiet_NaN() : v_trip;
            } else {
                if (!std::isnan(v_att) && !std::isnan(v_trip)) {
                    val_metric = combined_loss(v_att, v_trip, cfg.weights);
                    res.curves.push_back({epoch, "val", "combined", val_metric});
                }
            }
        }

        res.epochs_run = epoch;

        // Divergence: only a non-finite loss aborts; growing validation loss
        // is surfaced through the curves.
        bool nonfinite_row = false;
        for (const auto& r : res.curves)
            if (r.epoch == epoch && !std::isfinite(r.value)) nonfinite_row = true;
        if (blew_up || nonfinite_row) {
            res.diverged = true;
            break;
        }

        const double selection = !val.empty() && std::isfinite(val_metric)
                                     ? val_metric
                                     : (att_n > 0 ? tr_att / att_n
                                        : trip_n > 0 ? tr_trip / trip_n
                                        : ce_n > 0 ? tr_ce / ce_n
                                                   : std::numeric_limits<double>::infinity());
        if (selection < res.best_val) {
            res.best_val = selection;
            res.best_epoch = epoch;
            best_state = model.state_dict();
        }
    }

    model.load_state_dict(best_state);
    model.set_training(false);
    return res;
}

}  // namespace npap
