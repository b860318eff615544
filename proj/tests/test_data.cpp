#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <map>
#include <set>

#include "neuropapyri/data.hpp"

using namespace npap;
namespace fs = std::filesystem;

namespace {

std::set<std::string> source_set(const std::vector<LineSample>& lines) {
    std::set<std::string> s;
    for (const auto& l : lines) s.insert(l.glyph_sources.begin(), l.glyph_sources.end());
    return s;
}

fs::path temp_dir(const std::string& name) {
    auto p = fs::temp_directory_path() / ("npap_test_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

}  // namespace

TEST_CASE("synthetic line dimension law: height 70, width 70*k") {
    auto bank = make_toy_bank(2, 1);
    for (int k : {1, 5, 10}) {
        Rng rng(33);
        auto line = build_synthetic_line(bank, rng, k);
        REQUIRE(line.image.h == 70);
        REQUIRE(line.image.w == 70 * k);
        REQUIRE(line.transcription.size() == static_cast<size_t>(k));
        REQUIRE(line.glyph_sources.size() == static_cast<size_t>(k));
    }
}

TEST_CASE("synthetic line is byte-deterministic under seeding") {
    auto bank = make_toy_bank(3, 7);
    Rng r1(99), r2(99);
    auto a = build_synthetic_line(bank, r1, 10);
    auto b = build_synthetic_line(bank, r2, 10);
    REQUIRE(a.image.px == b.image.px);
    REQUIRE(a.transcription == b.transcription);
    REQUIRE(a.glyph_sources == b.glyph_sources);
}

TEST_CASE("synthetic dataset: counts and no glyph leakage (exhaustive)") {
    // ~200-entry bank: 24 letters x 9 exemplars = 216
    auto bank = make_toy_bank(9, 5);
    auto ds = build_synthetic_dataset(bank, 64, 16, /*seed=*/11);
    REQUIRE(ds.train.size() == 64);
    REQUIRE(ds.test.size() == 16);
    auto tr = source_set(ds.train), te = source_set(ds.test);
    for (const auto& id : te) REQUIRE(tr.count(id) == 0);
    const auto audit = audit_leakage(ds.train, ds.test);
    REQUIRE(audit.shared == 0);
    REQUIRE(audit.train_sources > 0);
    REQUIRE(audit.test_sources > 0);
}

TEST_CASE("synthetic dataset: minimum size keeps pools disjoint") {
    auto bank = make_toy_bank(4, 2);
    auto ds = build_synthetic_dataset(bank, 1, 1, 3);
    auto tr = source_set(ds.train), te = source_set(ds.test);
    for (const auto& id : te) REQUIRE(tr.count(id) == 0);
}

TEST_CASE("synthetic dataset: determinism and insufficient bank") {
    auto bank = make_toy_bank(3, 8);
    auto a = build_synthetic_dataset(bank, 8, 4, 21);
    auto b = build_synthetic_dataset(bank, 8, 4, 21);
    for (size_t i = 0; i < a.train.size(); ++i) {
        REQUIRE(a.train[i].image.px == b.train[i].image.px);
        REQUIRE(a.train[i].transcription == b.train[i].transcription);
    }
    auto tiny = make_toy_bank(1, 9);  // cannot split one exemplar per letter
    REQUIRE_THROWS_AS(build_synthetic_dataset(tiny, 4, 2, 1), InsufficientBankError);
}

TEST_CASE("compose_line throws MissingLetter on an empty pool") {
    auto bank = make_toy_bank(2, 3);
    LetterPools pools = bank.by_letter;
    for (auto& p : pools) p.clear();
    Rng rng(1);
    REQUIRE_THROWS_AS(compose_line(bank, pools, rng, 4), MissingLetterError);
}

TEST_CASE("pseudo documents: counts, identities, disjoint per-doc pools") {
    auto bank = make_toy_bank(6, 12);
    auto lines = build_pseudo_documents(bank, 2, 3, 17);
    REQUIRE(lines.size() == 6);
    std::set<std::string> docs;
    std::map<std::string, std::set<std::string>> pools;
    for (const auto& l : lines) {
        docs.insert(l.document_id);
        pools[l.document_id].insert(l.glyph_sources.begin(), l.glyph_sources.end());
    }
    REQUIRE(docs.size() == 2);
    for (const auto& s : pools["pdoc000"]) REQUIRE(pools["pdoc001"].count(s) == 0);

    auto big = build_pseudo_documents(bank, 3, 30, 4);
    REQUIRE(big.size() == 90);

    auto again = build_pseudo_documents(bank, 2, 3, 17);
    for (size_t i = 0; i < lines.size(); ++i) {
        REQUIRE(lines[i].image.px == again[i].image.px);
        REQUIRE(lines[i].document_id == again[i].document_id);
    }

    REQUIRE_THROWS_AS(build_pseudo_documents(bank, 7, 1, 1), InsufficientBankError);
}

// ---------------------------------------------------------------------------
// extract_lines
// ---------------------------------------------------------------------------

namespace {

Image blank_page(int h, int w) { return Image(h, w, 200); }

// Brute-force oracle: full pairwise overlap matrix + connected components.
std::vector<std::vector<size_t>> oracle_groups(const std::vector<CharBox>& boxes) {
    const size_t n = boxes.size();
    std::vector<std::vector<bool>> adj(n, std::vector<bool>(n, false));
    for (size_t i = 0; i < n; ++i)
        for (size_t j = 0; j < n; ++j) {
            if (i == j) continue;
            const double ov = std::min(boxes[i].y + boxes[i].h, boxes[j].y + boxes[j].h) -
                              std::max(boxes[i].y, boxes[j].y);
            if (ov >= 0.5 * std::min(boxes[i].h, boxes[j].h)) adj[i][j] = true;
        }
    std::vector<int> comp(n, -1);
    int nc = 0;
    for (size_t i = 0; i < n; ++i) {
        if (comp[i] >= 0) continue;
        std::vector<size_t> stack = {i};
        comp[i] = nc;
        while (!stack.empty()) {
            const size_t u = stack.back();
            stack.pop_back();
            for (size_t v = 0; v < n; ++v)
                if (adj[u][v] && comp[v] < 0) {
                    comp[v] = nc;
                    stack.push_back(v);
                }
        }
        ++nc;
    }
    std::vector<std::vector<size_t>> groups(static_cast<size_t>(nc));
    for (size_t i = 0; i < n; ++i) groups[static_cast<size_t>(comp[i])].push_back(i);
    return groups;
}

}  // namespace

TEST_CASE("extract_lines: identical y-intervals form one line ordered by x") {
    auto page = blank_page(60, 200);
    std::vector<CharBox> boxes = {{120, 10, 20, 30, "β", "good"}, {40, 10, 20, 30, "α", "good"}};
    auto res = extract_lines(page, boxes, "docA");
    REQUIRE(res.lines.size() == 1);
    REQUIRE(res.lines[0].transcription ==
            std::vector<uint8_t>{static_cast<uint8_t>(greek::letter_index("α")),
                                 static_cast<uint8_t>(greek::letter_index("β"))});
    REQUIRE(res.lines[0].document_id == "docA");
    // crop = union bbox + 5 px pad
    REQUIRE(res.lines[0].image.w == (140 + 5) - (40 - 5));
    REQUIRE(res.lines[0].image.h == (40 + 5) - (10 - 5));
}

TEST_CASE("extract_lines: zero vertical overlap splits lines") {
    auto page = blank_page(120, 100);
    std::vector<CharBox> boxes = {{10, 10, 20, 25, "γ", "good"}, {10, 70, 20, 25, "δ", "good"}};
    auto res = extract_lines(page, boxes, "docB");
    REQUIRE(res.lines.size() == 2);
    REQUIRE(res.lines[0].transcription.size() == 1);
    REQUIRE(res.lines[1].transcription.size() == 1);
    REQUIRE(res.lines[0].transcription[0] == static_cast<uint8_t>(greek::letter_index("γ")));
}

TEST_CASE("extract_lines: 7-box page matches the brute-force overlap oracle") {
    auto page = blank_page(200, 400);
    // three rough rows, middle row slightly sloped, one tall box linking rows
    std::vector<CharBox> boxes = {
        {20, 20, 18, 28, "α", "good"},  {50, 22, 18, 28, "β", "good"},
        {90, 18, 18, 30, "γ", "dam"},   {30, 80, 20, 26, "δ", "good"},
        {60, 88, 20, 26, "ε", "good"},  {25, 140, 22, 30, "ζ", "good"},
        {70, 130, 16, 52, "η", "good"},
    };
    auto expected = oracle_groups(boxes);
    auto res = extract_lines(page, boxes, "docC");
    REQUIRE(res.lines.size() == expected.size());
    // every annotated character appears exactly once across emitted lines
    size_t total = 0;
    for (const auto& l : res.lines) total += l.transcription.size();
    REQUIRE(total == boxes.size());
    // group contents match (letter multisets per group, order-free)
    std::multiset<std::multiset<uint8_t>> got, want;
    for (const auto& l : res.lines) got.insert({l.transcription.begin(), l.transcription.end()});
    for (const auto& g : expected) {
        std::multiset<uint8_t> m;
        for (size_t i : g) m.insert(static_cast<uint8_t>(greek::letter_index(boxes[i].letter)));
        want.insert(m);
    }
    REQUIRE(got == want);
}

TEST_CASE("extract_lines: empty annotations give an empty list") {
    auto page = blank_page(50, 50);
    REQUIRE(extract_lines(page, {}, "d").lines.empty());
}

TEST_CASE("extract_lines: random pages preserve every character once") {
    Rng rng(77);
    for (int trial = 0; trial < 20; ++trial) {
        auto page = blank_page(300, 300);
        std::vector<CharBox> boxes;
        const int n = 1 + static_cast<int>(rng.below(12));
        for (int i = 0; i < n; ++i) {
            CharBox b;
            b.x = rng.uniform(0, 260);
            b.y = rng.uniform(0, 260);
            b.w = 10 + rng.uniform(0, 25);
            b.h = 10 + rng.uniform(0, 25);
            b.letter = greek::letters()[rng.below(24)];
            boxes.push_back(b);
        }
        auto res = extract_lines(page, boxes, "r");
        size_t total = 0;
        for (const auto& l : res.lines) total += l.transcription.size();
        REQUIRE(total == boxes.size());
        REQUIRE(res.lines.size() == oracle_groups(boxes).size());
    }
}

// ---------------------------------------------------------------------------
// split / augment / distribution
// ---------------------------------------------------------------------------

namespace {
std::vector<LineSample> dummy_lines(const std::vector<std::pair<std::string, int>>& docs) {
    std::vector<LineSample> out;
    int id = 0;
    for (const auto& [doc, n] : docs)
        for (int i = 0; i < n; ++i) {
            LineSample s;
            s.id = strf("s%04d", id++);
            s.document_id = doc;
            s.transcription = {0};
            out.push_back(std::move(s));
        }
    return out;
}
}  // namespace

TEST_CASE("split_dataset: 10 lines one document -> 8/2") {
    auto lines = dummy_lines({{"d", 10}});
    auto [train, test] = split_dataset(lines, 0.8, 1);
    REQUIRE(train.size() == 8);
    REQUIRE(test.size() == 2);
}

TEST_CASE("split_dataset: single line -> 1 train / 0 test") {
    auto lines = dummy_lines({{"d", 1}});
    auto [train, test] = split_dataset(lines, 0.8, 1);
    REQUIRE(train.size() == 1);
    REQUIRE(test.empty());
}

TEST_CASE("split_dataset: 5 docs x 20 lines -> 16/4 per document") {
    auto lines = dummy_lines({{"a", 20}, {"b", 20}, {"c", 20}, {"d", 20}, {"e", 20}});
    auto [train, test] = split_dataset(lines, 0.8, 7);
    std::map<std::string, int> tr, te;
    for (const auto& s : train) ++tr[s.document_id];
    for (const auto& s : test) ++te[s.document_id];
    for (const auto* doc : {"a", "b", "c", "d", "e"}) {
        REQUIRE(tr[doc] == 16);
        REQUIRE(te[doc] == 4);
    }
}

TEST_CASE("split_dataset: every >=2-line document reaches both splits") {
    auto lines = dummy_lines({{"a", 2}, {"b", 3}, {"c", 2}});
    auto [train, test] = split_dataset(lines, 0.9, 3);
    std::set<std::string> tr, te;
    for (const auto& s : train) tr.insert(s.document_id);
    for (const auto& s : test) te.insert(s.document_id);
    REQUIRE(tr.size() == 3);
    REQUIRE(te.size() == 3);
}

TEST_CASE("augment_greyscale: rate 0 identity, rate 1 luminance") {
    auto bank = make_toy_bank(1, 4);
    const Image& img = bank.entries[0].image;
    Rng rng(5);
    Image same = augment_greyscale(img, 0.0, rng);
    REQUIRE(same.px == img.px);
    Image grey = augment_greyscale(img, 1.0, rng);
    for (int y = 0; y < grey.h; ++y)
        for (int x = 0; x < grey.w; ++x) {
            REQUIRE(grey.at(y, x, 0) == grey.at(y, x, 1));
            REQUIRE(grey.at(y, x, 1) == grey.at(y, x, 2));
        }
    REQUIRE_THROWS_AS(augment_greyscale(img, 1.5, rng), ConfigError);
}

TEST_CASE("augment_greyscale: binomial oracle at rate 0.2") {
    auto bank = make_toy_bank(1, 6);
    const Image& img = bank.entries[1].image;  // a tinted glyph, so grey != original
    Rng rng(123);
    int64_t grey_count = 0;
    for (int i = 0; i < 10000; ++i) {
        Image out = augment_greyscale(img, 0.2, rng);
        if (out.px != img.px) ++grey_count;
    }
    // binomial: mean 2000, sigma = sqrt(10000*0.2*0.8) = 40; 3 sigma = 120
    REQUIRE(grey_count >= 2000 - 120);
    REQUIRE(grey_count <= 2000 + 120);
}

TEST_CASE("char_distribution: trivial and brute-force cases") {
    LineSample s;
    s.transcription = {0, 0};  // "αα"
    auto hist = char_distribution({s});
    REQUIRE(hist[0] == 2);
    for (int k = 1; k < 24; ++k) REQUIRE(hist[static_cast<size_t>(k)] == 0);

    REQUIRE(char_distribution({}) == std::array<int64_t, 24>{});

    auto bank = make_toy_bank(3, 2);
    std::vector<LineSample> lines;
    for (int i = 0; i < 100; ++i) {
        Rng rng(mix64(9, static_cast<uint64_t>(i)));
        lines.push_back(build_synthetic_line(bank, rng, 10));
    }
    auto h = char_distribution(lines);
    std::array<int64_t, 24> ref{};
    for (const auto& l : lines)
        for (uint8_t k : l.transcription) ++ref[k];
    REQUIRE(h == ref);
    int64_t total = 0;
    for (auto v : h) total += v;
    REQUIRE(total == 1000);
}

// ---------------------------------------------------------------------------
// manifest + bank I/O
// ---------------------------------------------------------------------------

TEST_CASE("manifest round trip and validation") {
    auto dir = temp_dir("manifest");
    std::vector<ManifestRecord> records = {
        {"images/train/a.png", "doc1", "αβγ", "train"},
        {"images/test/b.png", "doc2", "σσω", "test"},
    };
    const auto path = (dir / "manifest.jsonl").string();
    write_manifest(path, records);
    auto back = read_manifest(path);
    REQUIRE(back.size() == 2);
    REQUIRE(back[0].image == records[0].image);
    REQUIRE(back[1].text == "σσω");

    std::vector<ManifestRecord> dup = {{"x.png", "d", "α", "train"}, {"x.png", "d", "β", "test"}};
    write_manifest(path, dup);
    REQUIRE_THROWS_AS(read_manifest(path), DataError);
}

TEST_CASE("save_dataset + load_samples round trip") {
    auto dir = temp_dir("dataset");
    auto bank = make_toy_bank(3, 14);
    auto ds = build_synthetic_dataset(bank, 4, 2, 31);
    std::vector<LineSample> all = ds.train;
    all.insert(all.end(), ds.test.begin(), ds.test.end());
    save_dataset(dir.string(), all);
    auto loaded = load_samples((dir / "manifest.jsonl").string());
    REQUIRE(loaded.size() == 6);
    int train_n = 0;
    for (const auto& s : loaded) {
        if (s.split_tag == "train") ++train_n;
        REQUIRE(s.image.h == 70);
        REQUIRE(s.image.w == 700);
    }
    REQUIRE(train_n == 4);
    // transcriptions survive the round trip
    REQUIRE(loaded[0].transcription == all[0].transcription);
}

TEST_CASE("char bank directory round trip") {
    auto dir = temp_dir("bank");
    auto bank = make_toy_bank(2, 19);
    write_char_bank(dir.string(), bank);
    auto back = load_char_bank(dir.string());
    REQUIRE(back.size() == bank.size());
    for (int k = 0; k < 24; ++k) REQUIRE(back.by_letter[static_cast<size_t>(k)].size() == 2);
    // PNG round trip is lossless
    REQUIRE(back.entries[0].image.px == bank.entries[0].image.px);
}
