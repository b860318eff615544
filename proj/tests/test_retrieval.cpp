#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <map>

#include "neuropapyri/retrieval.hpp"
#include "neuropapyri/training.hpp"

using namespace npap;

namespace {

EmbeddingIndex random_index(int n_entries, int n_docs, int dim, uint64_t seed) {
    Rng rng(seed);
    EmbeddingIndex index;
    for (int i = 0; i < n_entries; ++i) {
        std::vector<double> e(static_cast<size_t>(dim));
        for (auto& v : e) v = rng.normal();
        index_add(index, strf("s%04d", i), strf("doc%d", static_cast<int>(rng.below(n_docs))), e);
    }
    return index;
}

// Brute-force leave-one-out oracle: full distance table, nearest other entry
// with (distance, id) ordering, then accuracy and the per-document confusion.
struct LooOracle {
    double top1;
    double f1_macro;
    int64_t skipped;
};

LooOracle loo_oracle(const EmbeddingIndex& index) {
    std::map<std::string, int64_t> doc_count;
    for (const auto& e : index.entries) ++doc_count[e.document_id];
    int64_t correct = 0, evaluated = 0, skipped = 0;
    std::map<std::string, int64_t> queries, predicted, tp;
    for (const auto& q : index.entries) {
        if (doc_count[q.document_id] < 2) {
            ++skipped;
            continue;
        }
        const IndexEntry* best = nullptr;
        double best_d = 1e300;
        for (const auto& g : index.entries) {
            if (g.sample_id == q.sample_id) continue;
            double dot = 0;
            for (size_t j = 0; j < q.emb.size(); ++j) dot += q.emb[j] * g.emb[j];
            const double d = 1.0 - dot;
            if (d < best_d || (d == best_d && g.sample_id < best->sample_id)) {
                best = &g;
                best_d = d;
            }
        }
        ++evaluated;
        ++queries[q.document_id];
        ++predicted[best->document_id];
        if (best->document_id == q.document_id) {
            ++correct;
            ++tp[q.document_id];
        }
    }
    double f1_sum = 0;
    int64_t f1_n = 0;
    for (const auto& [doc, nq] : queries) {
        const double prec = predicted[doc] > 0 ? double(tp[doc]) / predicted[doc] : 0.0;
        const double rec = double(tp[doc]) / nq;
        f1_sum += prec + rec > 0 ? 2 * prec * rec / (prec + rec) : 0.0;
        ++f1_n;
    }
    return {double(correct) / evaluated, f1_sum / f1_n, skipped};
}

}  // namespace

TEST_CASE("index: empty build, unit norms, duplicate ids rejected") {
    EmbeddingIndex empty;
    REQUIRE(empty.size() == 0);
    auto index = random_index(20, 3, 8, 1);
    for (const auto& e : index.entries) {
        double n = 0;
        for (double v : e.emb) n += v * v;
        REQUIRE_THAT(std::sqrt(n), Catch::Matchers::WithinAbs(1.0, 1e-6));
    }
    std::vector<double> raw = {1.0, 2.0};
    EmbeddingIndex dup;
    index_add(dup, "a", "d", raw);
    REQUIRE_THROWS_AS(index_add(dup, "a", "d", raw), DataError);
    REQUIRE_THROWS_AS(index_add(dup, "b", "d", std::vector<double>{0.0, 0.0}), ZeroVectorError);
}

TEST_CASE("query: exact gallery entry ranks first at distance zero") {
    auto index = random_index(12, 2, 6, 2);
    const auto& probe = index.entries[5];
    auto res = query(index, probe.emb, 3);
    REQUIRE(res.ranked.size() == 3);
    REQUIRE(res.ranked[0].sample_id == probe.sample_id);
    REQUIRE_THAT(res.ranked[0].distance, Catch::Matchers::WithinAbs(0.0, 1e-12));
}

TEST_CASE("query: k beyond the gallery clamps; self-exclusion; empty gallery") {
    auto index = random_index(5, 2, 4, 3);
    auto res = query(index, index.entries[0].emb, 100, index.entries[0].sample_id);
    REQUIRE(res.ranked.size() == 4);
    for (const auto& hit : res.ranked) REQUIRE(hit.sample_id != index.entries[0].sample_id);

    EmbeddingIndex one;
    index_add(one, "only", "d", std::vector<double>{1.0, 0.0});
    REQUIRE_THROWS_AS(query(one, one.entries[0].emb, 1, "only"), EmptyGalleryError);
}

TEST_CASE("query ranking equals a brute-force full sort (20 entries)") {
    auto index = random_index(20, 4, 7, 4);
    Rng rng(5);
    std::vector<double> probe(7);
    for (auto& v : probe) v = rng.normal();
    auto res = query(index, probe, 20);
    // oracle: full sort by (distance, id)
    auto pn = l2_normalize(probe);
    std::vector<std::pair<double, std::string>> ref;
    for (const auto& e : index.entries) {
        double dot = 0;
        for (size_t j = 0; j < pn.size(); ++j) dot += pn[j] * e.emb[j];
        ref.push_back({1.0 - dot, e.sample_id});
    }
    std::sort(ref.begin(), ref.end());
    REQUIRE(res.ranked.size() == ref.size());
    for (size_t i = 0; i < ref.size(); ++i) {
        REQUIRE(res.ranked[i].sample_id == ref[i].second);
        REQUIRE_THAT(res.ranked[i].distance, Catch::Matchers::WithinAbs(ref[i].first, 1e-12));
    }
    // distances non-decreasing
    for (size_t i = 1; i < res.ranked.size(); ++i)
        REQUIRE(res.ranked[i].distance >= res.ranked[i - 1].distance);
}

TEST_CASE("top1 on two tight separable clusters is 1.0") {
    EmbeddingIndex index;
    Rng rng(6);
    for (int i = 0; i < 6; ++i) {
        std::vector<double> e = {10.0 + rng.uniform(), rng.uniform() * 0.01};
        index_add(index, strf("a%d", i), "docA", e);
    }
    for (int i = 0; i < 6; ++i) {
        std::vector<double> e = {rng.uniform() * 0.01, 10.0 + rng.uniform()};
        index_add(index, strf("b%d", i), "docB", e);
    }
    auto st = leave_one_out(index);
    REQUIRE(st.top1 == 1.0);
    REQUIRE(st.f1_macro == 1.0);
    REQUIRE(st.degenerate_ties == 0);
    REQUIRE(st.skipped_queries == 0);
}

TEST_CASE("identical embeddings across two documents flag degenerate ties") {
    EmbeddingIndex index;
    const std::vector<double> same = {1.0, 1.0};
    for (int i = 0; i < 3; ++i) index_add(index, strf("a%d", i), "docA", same);
    for (int i = 0; i < 3; ++i) index_add(index, strf("b%d", i), "docB", same);
    auto st = leave_one_out(index);
    REQUIRE(st.degenerate_ties == 6);
    // id-based tie-break decides; a0's nearest is a1 -> correct, b0's nearest is a0 -> wrong
    REQUIRE(st.evaluated == 6);
}

TEST_CASE("leave-one-out equals the brute-force oracle (30 entries, 3 docs)") {
    for (uint64_t seed : {7ULL, 8ULL, 9ULL}) {
        auto index = random_index(30, 3, 5, seed);
        auto st = leave_one_out(index);
        auto ref = loo_oracle(index);
        REQUIRE_THAT(st.top1, Catch::Matchers::WithinAbs(ref.top1, 1e-12));
        REQUIRE_THAT(st.f1_macro, Catch::Matchers::WithinAbs(ref.f1_macro, 1e-12));
        REQUIRE(st.skipped_queries == ref.skipped);
    }
}

TEST_CASE("f1@1: a never-predicted document contributes zero to the macro mean") {
    EmbeddingIndex index;
    // docC's entries are both nearer to docA's cluster
    index_add(index, "a0", "docA", {1.0, 0.0, 0.0});
    index_add(index, "a1", "docA", {0.99, 0.01, 0.0});
    index_add(index, "c0", "docC", {0.98, 0.02, 0.0});
    index_add(index, "c1", "docC", {0.0, 0.0, 1.0});
    auto st = leave_one_out(index);
    REQUIRE(st.per_document_f1.at("docC") < 1.0);
    auto ref = loo_oracle(index);
    REQUIRE_THAT(st.f1_macro, Catch::Matchers::WithinAbs(ref.f1_macro, 1e-12));
}

TEST_CASE("top1/f1 are invariant under permutation of index entries") {
    auto index = random_index(25, 3, 6, 10);
    auto st = leave_one_out(index);
    Rng rng(11);
    auto shuffled = index;
    rng.shuffle(shuffled.entries);
    auto st2 = leave_one_out(shuffled);
    REQUIRE(st.top1 == st2.top1);
    REQUIRE(st.f1_macro == st2.f1_macro);
    REQUIRE(st.degenerate_ties == st2.degenerate_ties);
}

TEST_CASE("scaling all raw embeddings by a positive constant changes no metric") {
    Rng rng(12);
    EmbeddingIndex a, b;
    for (int i = 0; i < 18; ++i) {
        std::vector<double> e(5);
        for (auto& v : e) v = rng.normal();
        std::vector<double> scaled = e;
        for (auto& v : scaled) v *= 37.5;
        const auto doc = strf("doc%d", static_cast<int>(rng.below(3)));
        index_add(a, strf("s%d", i), doc, e);
        index_add(b, strf("s%d", i), doc, scaled);
    }
    auto sa = leave_one_out(a), sb = leave_one_out(b);
    REQUIRE(sa.top1 == sb.top1);
    REQUIRE(sa.f1_macro == sb.f1_macro);
}

TEST_CASE("empty index errors") {
    EmbeddingIndex empty;
    REQUIRE_THROWS_AS(leave_one_out(empty), EmptyIndexError);
}

// ---------------------------------------------------------------------------
// character-identification metrics
// ---------------------------------------------------------------------------

TEST_CASE("char_id_metrics: perfect and degenerate detectors") {
    Tensor<float> logits({2, 4}), labels({2, 4});
    labels.data = {1, 0, 1, 0, 0, 1, 0, 1};
    for (int64_t i = 0; i < 8; ++i) logits[i] = labels[i] > 0.5f ? 10.0f : -10.0f;
    auto m = char_id_metrics(logits, labels);
    REQUIRE(m.precision == 1.0);
    REQUIRE(m.recall == 1.0);
    REQUIRE(m.f1 == 1.0);

    logits.fill(-10.0f);
    auto m2 = char_id_metrics(logits, labels);
    REQUIRE(m2.recall == 0.0);
    REQUIRE(m2.f1 == 0.0);
}

TEST_CASE("char_id_metrics equals the brute-force count on random batches") {
    Rng rng(13);
    Tensor<float> logits = Tensor<float>::randn({8, 24}, rng, 4.0f);
    Tensor<float> labels({8, 24});
    for (auto& v : labels.data) v = rng.below(2) ? 1.0f : 0.0f;
    auto m = char_id_metrics(logits, labels);
    int64_t tp = 0, fp = 0, fn = 0;
    for (int64_t i = 0; i < logits.numel(); ++i) {
        const bool pred = logits[i] > 0.0f;  // sigmoid > 0.5 <=> logit > 0
        const bool pos = labels[i] > 0.5f;
        tp += pred && pos;
        fp += pred && !pos;
        fn += !pred && pos;
    }
    REQUIRE(m.tp == tp);
    REQUIRE(m.fp == fp);
    REQUIRE(m.fn == fn);
    const double p = tp + fp ? double(tp) / (tp + fp) : 0.0;
    const double r = tp + fn ? double(tp) / (tp + fn) : 0.0;
    REQUIRE_THAT(m.precision, Catch::Matchers::WithinAbs(p, 1e-12));
    REQUIRE_THAT(m.recall, Catch::Matchers::WithinAbs(r, 1e-12));
    // bounds + F1 <= max(P,R)
    REQUIRE(m.f1 >= 0.0);
    REQUIRE(m.f1 <= 1.0);
    REQUIRE(m.f1 <= std::max(m.precision, m.recall) + 1e-12);
}

TEST_CASE("per_letter_rate: perfect detector, absent letters, random oracle") {
    Tensor<float> logits({4, 24}), labels({4, 24});
    logits.fill(-5.0f);
    // letter 3 present everywhere and detected; letter 7 never present
    for (int64_t b = 0; b < 4; ++b) {
        labels.at(b, 3) = 1.0f;
        logits.at(b, 3) = 5.0f;
    }
    auto rates = per_letter_rate(logits, labels);
    REQUIRE(rates[3].has_value());
    REQUIRE(*rates[3] == 1.0);
    REQUIRE_FALSE(rates[7].has_value());

    Rng rng(14);
    Tensor<float> rl = Tensor<float>::randn({10, 24}, rng, 3.0f);
    Tensor<float> ry({10, 24});
    for (auto& v : ry.data) v = rng.below(4) == 0 ? 1.0f : 0.0f;
    auto rr = per_letter_rate(rl, ry);
    for (int k = 0; k < 24; ++k) {
        int64_t pos = 0, hit = 0;
        for (int64_t b = 0; b < 10; ++b)
            if (ry.at(b, k) > 0.5f) {
                ++pos;
                if (rl.at(b, k) > 0.0f) ++hit;
            }
        if (pos == 0) {
            REQUIRE_FALSE(rr[static_cast<size_t>(k)].has_value());
        } else {
            REQUIRE(rr[static_cast<size_t>(k)].has_value());
            REQUIRE_THAT(*rr[static_cast<size_t>(k)],
                         Catch::Matchers::WithinAbs(double(hit) / pos, 1e-12));
        }
    }
}

TEST_CASE("metrics report serializes with the fixed key set") {
    MetricsReport r;
    r.top1 = 0.9;
    r.f1_at_1 = 0.8;
    r.f1_at_1_micro = 0.85;
    r.char_precision = 0.7;
    r.char_recall = 0.6;
    r.char_f1 = 0.646;
    r.per_letter[0] = 1.0;
    r.skipped_queries = 2;
    r.degenerate_ties = 1;
    auto j = r.to_json();
    for (const char* key : {"top1", "f1_at_1", "char_precision", "char_recall", "char_f1",
                            "per_letter", "skipped_queries", "degenerate_ties"})
        REQUIRE(j.contains(key));
    REQUIRE(j["per_letter"].contains("α"));
    REQUIRE_FALSE(j["per_letter"].contains("β"));  // absent, not zero
    REQUIRE(j["f1_at_1_averaging"] == "macro");
}

TEST_CASE("embedding JSONL round trip") {
    namespace fs = std::filesystem;
    auto index = random_index(6, 2, 4, 15);
    const auto path = (fs::temp_directory_path() / "npap_test_emb.jsonl").string();
    save_index_jsonl(path, index);
    auto back = load_index_jsonl(path);
    REQUIRE(back.size() == index.size());
    for (size_t i = 0; i < back.size(); ++i) {
        REQUIRE(back.entries[i].sample_id == index.entries[i].sample_id);
        REQUIRE(back.entries[i].document_id == index.entries[i].document_id);
        for (size_t j = 0; j < back.entries[i].emb.size(); ++j)
            REQUIRE_THAT(back.entries[i].emb[j],
                         Catch::Matchers::WithinRel(index.entries[i].emb[j], 1e-12));
    }
}
