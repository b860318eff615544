#pragma once

// Retrieval: L2-normalized embedding index, exact cosine nearest-neighbor
// queries with deterministic id tie-breaks, leave-one-out document metrics
// (Top-1, macro/micro F1@1) and the character-identification metrics.

#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "neuropapyri/batching.hpp"

namespace npap {

struct IndexEntry {
    std::string sample_id;
    std::string document_id;
    std::vector<double> emb;  // L2-normalized
};

struct EmbeddingIndex {
    std::vector<IndexEntry> entries;
    size_t size() const { return entries.size(); }
};

inline std::vector<double> l2_normalize(const std::vector<double>& v) {
    double n = 0.0;
    for (double x : v) n += x * x;
    if (n == 0.0) throw ZeroVectorError("l2_normalize: zero vector");
    n = std::sqrt(n);
    std::vector<double> out(v.size());
    for (size_t i = 0; i < v.size(); ++i) out[i] = v[i] / n;
    return out;
}

inline void index_add(EmbeddingIndex& index, std::string sample_id, std::string document_id,
                      const std::vector<double>& raw_emb) {
    for (const auto& e : index.entries)
        if (e.sample_id == sample_id) throw DataError("index: duplicate sample id " + sample_id);
    index.entries.push_back({std::move(sample_id), std::move(document_id), l2_normalize(raw_emb)});
}

template <class T>
EmbeddingIndex build_index(NeuroPapyri<T>& model, const std::vector<LineSample>& samples,
                           int batch_size = 16) {
    EmbeddingIndex index;
    if (samples.empty()) return index;
    auto embs = compute_embeddings(model, samples, batch_size);
    for (size_t i = 0; i < samples.size(); ++i) {
        std::vector<double> e(embs[i].begin(), embs[i].end());
        index.entries.push_back({samples[i].id, samples[i].document_id, l2_normalize(e)});
    }
    return index;
}

inline double index_cosine_distance(const std::vector<double>& a, const std::vector<double>& b) {
    double dot = 0.0;
    for (size_t i = 0; i < a.size(); ++i) dot += a[i] * b[i];
    return 1.0 - dot;  // entries are unit-norm
}

struct RankedHit {
    std::string sample_id;
    std::string document_id;
    double distance;
};

struct RetrievalResult {
    std::string query_id;
    std::vector<RankedHit> ranked;  // ascending distance, ties by ascending id
};

// Exact k-nearest by cosine distance; the query id (if present in the index)
// is excluded. k larger than the gallery clamps to the gallery.
inline RetrievalResult query(const EmbeddingIndex& index, const std::vector<double>& emb, int64_t k,
                             const std::string& exclude_id = "") {
    if (k < 1) throw ConfigError("query: k must be >= 1");
    const auto q = l2_normalize(emb);
    RetrievalResult res;
    res.query_id = exclude_id;
    for (const auto& e : index.entries) {
        if (!exclude_id.empty() && e.sample_id == exclude_id) continue;
        res.ranked.push_back({e.sample_id, e.document_id, index_cosine_distance(q, e.emb)});
    }
    if (res.ranked.empty()) throw EmptyGalleryError("query: gallery empty after self-exclusion");
    std::sort(res.ranked.begin(), res.ranked.end(), [](const RankedHit& a, const RankedHit& b) {
        return a.distance != b.distance ? a.distance < b.distance : a.sample_id < b.sample_id;
    });
    if (static_cast<int64_t>(res.ranked.size()) > k) res.ranked.resize(static_cast<size_t>(k));
    return res;
}

// ---------------------------------------------------------------------------
// Leave-one-out document retrieval metrics
// ---------------------------------------------------------------------------

struct LeaveOneOutStats {
    double top1 = 0.0;
    double f1_macro = 0.0;
    double f1_micro = 0.0;
    std::map<std::string, double> per_document_f1;
    int64_t evaluated = 0;
    int64_t skipped_queries = 0;   // entries whose document has a single line
    int64_t degenerate_ties = 0;   // rank-1 distance shared by several entries
};

inline LeaveOneOutStats leave_one_out(const EmbeddingIndex& index) {
    if (index.entries.empty()) throw EmptyIndexError("leave_one_out: empty index");
    std::map<std::string, int64_t> doc_count;
    for (const auto& e : index.entries) ++doc_count[e.document_id];

    LeaveOneOutStats st;
    std::map<std::string, int64_t> queries_of, predicted_as, correct_of;
    for (const auto& e : index.entries) {
        if (doc_count[e.document_id] < 2) {
            ++st.skipped_queries;
            continue;
        }
        double best_d = std::numeric_limits<double>::infinity();
        for (const auto& g : index.entries) {
            if (g.sample_id == e.sample_id) continue;
            best_d = std::min(best_d, index_cosine_distance(e.emb, g.emb));
        }
        const IndexEntry* best = nullptr;
        int64_t at_min = 0;
        for (const auto& g : index.entries) {
            if (g.sample_id == e.sample_id) continue;
            if (index_cosine_distance(e.emb, g.emb) == best_d) {
                ++at_min;
                if (!best || g.sample_id < best->sample_id) best = &g;
            }
        }
        if (at_min > 1) ++st.degenerate_ties;
        ++st.evaluated;
        ++queries_of[e.document_id];
        ++predicted_as[best->document_id];
        if (best->document_id == e.document_id) {
            ++correct_of[e.document_id];
            st.top1 += 1.0;
        }
    }
    if (st.evaluated == 0) throw EmptyIndexError("leave_one_out: all queries skipped");
    st.top1 /= static_cast<double>(st.evaluated);

    // Per-document F1 from the rank-1 confusion; macro over documents that
    // contributed at least one query. A document never predicted scores 0.
    double f1_sum = 0.0;
    int64_t f1_n = 0, tp_total = 0;
    for (const auto& [doc, nq] : queries_of) {
        const int64_t tp = correct_of.count(doc) ? correct_of[doc] : 0;
        const int64_t pred = predicted_as.count(doc) ? predicted_as[doc] : 0;
        const double prec = pred > 0 ? static_cast<double>(tp) / pred : 0.0;
        const double rec = static_cast<double>(tp) / nq;
        const double f1 = prec + rec > 0 ? 2 * prec * rec / (prec + rec) : 0.0;
        st.per_document_f1[doc] = f1;
        f1_sum += f1;
        ++f1_n;
        tp_total += tp;
    }
    st.f1_macro = f1_n > 0 ? f1_sum / f1_n : 0.0;
    // Micro: every query produces exactly one prediction, so micro precision
    // = micro recall = accuracy.
    st.f1_micro = static_cast<double>(tp_total) / st.evaluated;
    return st;
}

inline double top1_accuracy(const EmbeddingIndex& index) { return leave_one_out(index).top1; }
inline double f1_at_1(const EmbeddingIndex& index) { return leave_one_out(index).f1_macro; }

// ---------------------------------------------------------------------------
// Character-identification metrics (threshold 0.5 on the sigmoid)
// ---------------------------------------------------------------------------

struct CharIdMetrics {
    double precision = 0.0, recall = 0.0, f1 = 0.0;
    int64_t tp = 0, fp = 0, fn = 0;
};

template <class T>
CharIdMetrics char_id_metrics(const Tensor<T>& logits, const Tensor<T>& labels) {
    if (!logits.same_shape(labels) || logits.rank() != 2)
        throw ShapeMismatchError("char_id_metrics: logits/labels must share [B,N]");
    CharIdMetrics m;
    for (int64_t i = 0; i < logits.numel(); ++i) {
        const bool pred = ag::sigmoid_scalar(static_cast<double>(logits[i])) > 0.5;
        const bool pos = labels[i] > T(0.5);
        if (pred && pos) ++m.tp;
        else if (pred && !pos) ++m.fp;
        else if (!pred && pos) ++m.fn;
    }
    m.precision = m.tp + m.fp > 0 ? static_cast<double>(m.tp) / (m.tp + m.fp) : 0.0;
    m.recall = m.tp + m.fn > 0 ? static_cast<double>(m.tp) / (m.tp + m.fn) : 0.0;
    m.f1 = m.precision + m.recall > 0 ? 2 * m.precision * m.recall / (m.precision + m.recall) : 0.0;
    return m;
}

// Per-letter recall over samples whose label bit is set; letters with no
// positives are absent (nullopt), not zero. Requires the full 24-head setup.
template <class T>
std::array<std::optional<double>, greek::kNumLetters> per_letter_rate(const Tensor<T>& logits,
                                                                      const Tensor<T>& labels) {
    if (!logits.same_shape(labels) || logits.rank() != 2 || logits.shape[1] != greek::kNumLetters)
        throw ShapeMismatchError("per_letter_rate: expected [B,24] logits/labels");
    std::array<std::optional<double>, greek::kNumLetters> out{};
    for (int64_t k = 0; k < greek::kNumLetters; ++k) {
        int64_t pos = 0, hit = 0;
        for (int64_t b = 0; b < logits.shape[0]; ++b) {
            if (labels.at(b, k) > T(0.5)) {
                ++pos;
                if (ag::sigmoid_scalar(static_cast<double>(logits.at(b, k))) > 0.5) ++hit;
            }
        }
        if (pos > 0) out[static_cast<size_t>(k)] = static_cast<double>(hit) / pos;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Metrics report (fixed JSON schema)
// ---------------------------------------------------------------------------

struct MetricsReport {
    std::optional<double> top1;
    std::optional<double> f1_at_1;          // macro (default averaging)
    std::optional<double> f1_at_1_micro;
    std::map<std::string, double> per_document_f1;
    std::optional<double> char_precision, char_recall, char_f1;
    std::array<std::optional<double>, greek::kNumLetters> per_letter{};
    int64_t skipped_queries = 0;
    int64_t degenerate_ties = 0;

    nlohmann::json to_json() const {
        nlohmann::json j;
        auto put = [&j](const char* key, const std::optional<double>& v) {
            if (v)
                j[key] = *v;
            else
                j[key] = nullptr;
        };
        put("top1", top1);
        put("f1_at_1", f1_at_1);
        put("f1_at_1_micro", f1_at_1_micro);
        j["f1_at_1_averaging"] = "macro";
        put("char_precision", char_precision);
        put("char_recall", char_recall);
        put("char_f1", char_f1);
        nlohmann::json pl = nlohmann::json::object();
        for (int k = 0; k < greek::kNumLetters; ++k)
            if (per_letter[static_cast<size_t>(k)])
                pl[greek::letters()[static_cast<size_t>(k)]] = *per_letter[static_cast<size_t>(k)];
        j["per_letter"] = pl;
        j["skipped_queries"] = skipped_queries;
        j["degenerate_ties"] = degenerate_ties;
        if (!per_document_f1.empty()) j["per_document_f1"] = per_document_f1;
        return j;
    }
};

// ---------------------------------------------------------------------------
// Embedding JSONL persistence ({"image","doc","emb"} per line)
// ---------------------------------------------------------------------------

inline void save_index_jsonl(const std::string& path, const EmbeddingIndex& index) {
    std::filesystem::path p(path);
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    std::ofstream out(path);
    if (!out) throw IoError("cannot write embeddings: " + path);
    for (const auto& e : index.entries) {
        nlohmann::json j;
        j["image"] = e.sample_id;
        j["doc"] = e.document_id;
        j["emb"] = e.emb;
        out << j.dump() << "\n";
    }
}

inline EmbeddingIndex load_index_jsonl(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read embeddings: " + path);
    EmbeddingIndex index;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded()) throw DataError("embeddings: invalid JSON line in " + path);
        IndexEntry e;
        e.sample_id = j.value("image", "");
        e.document_id = j.value("doc", "");
        e.emb = j["emb"].get<std::vector<double>>();
        index.entries.push_back(std::move(e));
    }
    return index;
}

}  // namespace npap
