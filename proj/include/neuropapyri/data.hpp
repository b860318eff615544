#pragma once

// Dataset construction and ingestion: the character-image bank, synthetic
// line composition (with the train/test glyph-pool separation), pseudo
// documents for retrieval fixtures, real-page line extraction, splitting,
// augmentation and the JSONL manifest format.

#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "neuropapyri/common.hpp"
#include "neuropapyri/greek.hpp"
#include "neuropapyri/image.hpp"

namespace npap {

inline constexpr int kLineHeight = 70;
inline constexpr int kGlyphCell = 70;

// ---------------------------------------------------------------------------
// Samples and the character bank
// ---------------------------------------------------------------------------

struct LineSample {
    std::string id;                           // stable sample id
    Image image;
    std::string document_id;                  // empty for ungrouped synthetic lines
    std::vector<uint8_t> transcription;       // canonical letter indices
    std::string split_tag = "train";          // "train" | "test"
    std::vector<std::string> glyph_sources;   // synthetic lines: bank source ids
};

struct CharBankEntry {
    int letter = -1;          // canonical letter index
    Image image;
    std::string source_id;    // opaque, unique within the bank
};

struct CharBank {
    std::vector<CharBankEntry> entries;
    std::array<std::vector<int>, greek::kNumLetters> by_letter{};

    void add(CharBankEntry e) {
        if (e.letter < 0 || e.letter >= greek::kNumLetters)
            throw DataError("CharBank: letter index out of range");
        if (e.image.empty()) throw DataError("CharBank: empty glyph image");
        by_letter[static_cast<size_t>(e.letter)].push_back(static_cast<int>(entries.size()));
        entries.push_back(std::move(e));
    }
    size_t size() const { return entries.size(); }
};

// Bank directory layout: <root>/<letter>/<source>.png
inline CharBank load_char_bank(const std::string& root) {
    namespace fs = std::filesystem;
    CharBank bank;
    if (!fs::is_directory(root)) throw IoError("char bank directory not found: " + root);
    for (int k = 0; k < greek::kNumLetters; ++k) {
        const fs::path dir = fs::path(root) / greek::letters()[static_cast<size_t>(k)];
        if (!fs::is_directory(dir)) continue;
        std::vector<fs::path> files;
        for (const auto& e : fs::directory_iterator(dir))
            if (e.is_regular_file()) files.push_back(e.path());
        std::sort(files.begin(), files.end());
        for (const auto& f : files) {
            CharBankEntry e;
            e.letter = k;
            e.image = load_image(f.string());
            e.source_id = greek::letters()[static_cast<size_t>(k)] + "/" + f.filename().string();
            bank.add(std::move(e));
        }
    }
    if (bank.entries.empty()) throw IoError("char bank is empty: " + root);
    return bank;
}

inline void write_char_bank(const std::string& root, const CharBank& bank) {
    namespace fs = std::filesystem;
    std::array<int, greek::kNumLetters> counter{};
    for (const auto& e : bank.entries) {
        const auto& letter = greek::letters()[static_cast<size_t>(e.letter)];
        const std::string name = strf("ex%04d.png", counter[static_cast<size_t>(e.letter)]++);
        save_png((fs::path(root) / letter / name).string(), e.image);
    }
}

// ---------------------------------------------------------------------------
// Synthetic line composition
// ---------------------------------------------------------------------------

using LetterPools = std::array<std::vector<int>, greek::kNumLetters>;

// Pastes n_chars glyphs (resized to 70x70 cells) side by side. Letters are
// drawn uniformly; exemplars uniformly from the given per-letter pools.
inline LineSample compose_line(const CharBank& bank, const LetterPools& pools, Rng& rng,
                               int n_chars) {
    if (n_chars < 1) throw DataError("compose_line: n_chars must be >= 1");
    LineSample s;
    s.image = Image(kLineHeight, kGlyphCell * n_chars);
    for (int j = 0; j < n_chars; ++j) {
        const int letter = static_cast<int>(rng.below(greek::kNumLetters));
        const auto& pool = pools[static_cast<size_t>(letter)];
        if (pool.empty())
            throw MissingLetterError("no bank entry for letter " +
                                     greek::letters()[static_cast<size_t>(letter)]);
        const auto& entry = bank.entries[static_cast<size_t>(pool[rng.below(pool.size())])];
        Image cell = resize_bilinear(entry.image, kLineHeight, kGlyphCell);
        for (int y = 0; y < kLineHeight; ++y)
            for (int x = 0; x < kGlyphCell; ++x)
                for (int c = 0; c < 3; ++c) s.image.at(y, j * kGlyphCell + x, c) = cell.at(y, x, c);
        s.transcription.push_back(static_cast<uint8_t>(letter));
        s.glyph_sources.push_back(entry.source_id);
    }
    return s;
}

inline LineSample build_synthetic_line(const CharBank& bank, Rng& rng, int n_chars = 10) {
    return compose_line(bank, bank.by_letter, rng, n_chars);
}

struct SyntheticDataset {
    std::vector<LineSample> train, test;
};

// Builds the train/test line sets from disjoint per-letter glyph pools so no
// character image used in a test line ever appears in a train line.
inline SyntheticDataset build_synthetic_dataset(const CharBank& bank, int64_t n_train = 32768,
                                                int64_t n_test = 1024, uint64_t seed = 0,
                                                int n_chars = 10) {
    if (n_train < 1 || n_test < 1) throw DataError("build_synthetic_dataset: need n_train,n_test >= 1");
    Rng master(seed);
    LetterPools train_pools, test_pools;
    const double test_ratio = static_cast<double>(n_test) / static_cast<double>(n_train + n_test);
    for (int k = 0; k < greek::kNumLetters; ++k) {
        auto pool = bank.by_letter[static_cast<size_t>(k)];
        if (pool.size() < 2)
            throw InsufficientBankError(strf("letter %s has %zu exemplars; need >= 2 to split",
                                             greek::letters()[static_cast<size_t>(k)].c_str(),
                                             pool.size()));
        Rng r = master.child(1000 + static_cast<uint64_t>(k));
        r.shuffle(pool);
        auto n_test_pool = static_cast<int64_t>(std::llround(test_ratio * static_cast<double>(pool.size())));
        n_test_pool = std::clamp<int64_t>(n_test_pool, 1, static_cast<int64_t>(pool.size()) - 1);
        test_pools[static_cast<size_t>(k)].assign(pool.begin(), pool.begin() + n_test_pool);
        train_pools[static_cast<size_t>(k)].assign(pool.begin() + n_test_pool, pool.end());
    }
    SyntheticDataset out;
    out.train.reserve(static_cast<size_t>(n_train));
    out.test.reserve(static_cast<size_t>(n_test));
    for (int64_t i = 0; i < n_train; ++i) {
        Rng r = master.child(mix64(2, static_cast<uint64_t>(i)));
        LineSample s = compose_line(bank, train_pools, r, n_chars);
        s.id = strf("synth-train-%06lld", static_cast<long long>(i));
        s.split_tag = "train";
        out.train.push_back(std::move(s));
    }
    for (int64_t i = 0; i < n_test; ++i) {
        Rng r = master.child(mix64(3, static_cast<uint64_t>(i)));
        LineSample s = compose_line(bank, test_pools, r, n_chars);
        s.id = strf("synth-test-%06lld", static_cast<long long>(i));
        s.split_tag = "test";
        out.test.push_back(std::move(s));
    }
    return out;
}

struct LeakageAudit {
    int64_t train_sources = 0, test_sources = 0, shared = 0;
    std::vector<std::string> shared_examples;
};

inline LeakageAudit audit_leakage(const std::vector<LineSample>& train,
                                  const std::vector<LineSample>& test) {
    std::set<std::string> ts, vs;
    for (const auto& s : train) ts.insert(s.glyph_sources.begin(), s.glyph_sources.end());
    for (const auto& s : test) vs.insert(s.glyph_sources.begin(), s.glyph_sources.end());
    LeakageAudit a;
    a.train_sources = static_cast<int64_t>(ts.size());
    a.test_sources = static_cast<int64_t>(vs.size());
    for (const auto& id : vs)
        if (ts.count(id)) {
            ++a.shared;
            if (a.shared_examples.size() < 8) a.shared_examples.push_back(id);
        }
    return a;
}

// Each pseudo-document draws glyphs only from its own per-letter exemplar
// chunk, simulating one scribal hand; gives the synthetic corpus the
// document identities retrieval training needs.
inline std::vector<LineSample> build_pseudo_documents(const CharBank& bank, int n_docs,
                                                      int lines_per_doc, uint64_t seed,
                                                      int n_chars = 10) {
    if (n_docs < 1 || lines_per_doc < 1)
        throw DataError("build_pseudo_documents: need n_docs,lines_per_doc >= 1");
    Rng master(seed);
    std::vector<LetterPools> doc_pools(static_cast<size_t>(n_docs));
    for (int k = 0; k < greek::kNumLetters; ++k) {
        auto pool = bank.by_letter[static_cast<size_t>(k)];
        const auto chunk = static_cast<int64_t>(pool.size()) / n_docs;
        if (chunk < 1)
            throw InsufficientBankError(strf("letter %s has %zu exemplars; need >= %d for %d docs",
                                             greek::letters()[static_cast<size_t>(k)].c_str(),
                                             pool.size(), n_docs, n_docs));
        Rng r = master.child(3000 + static_cast<uint64_t>(k));
        r.shuffle(pool);
        for (int d = 0; d < n_docs; ++d)
            doc_pools[static_cast<size_t>(d)][static_cast<size_t>(k)].assign(
                pool.begin() + d * chunk, pool.begin() + (d + 1) * chunk);
    }
    std::vector<LineSample> out;
    out.reserve(static_cast<size_t>(n_docs) * lines_per_doc);
    for (int d = 0; d < n_docs; ++d)
        for (int j = 0; j < lines_per_doc; ++j) {
            Rng r = master.child(mix64(static_cast<uint64_t>(d) + 1, static_cast<uint64_t>(j)));
            LineSample s = compose_line(bank, doc_pools[static_cast<size_t>(d)], r, n_chars);
            s.document_id = strf("pdoc%03d", d);
            s.id = strf("pdoc%03d-l%04d", d, j);
            out.push_back(std::move(s));
        }
    return out;
}

// ---------------------------------------------------------------------------
// Real-page ingestion: character boxes -> text lines
// ---------------------------------------------------------------------------

struct CharBox {
    double x = 0, y = 0, w = 0, h = 0;
    std::string letter;
    std::string quality;  // retained as annotated; no filtering
};

struct ExtractResult {
    std::vector<LineSample> lines;
    int64_t dropped_glyphs = 0;  // annotation letters outside the canonical set
};

namespace detail {
struct UnionFind {
    std::vector<int> parent;
    explicit UnionFind(size_t n) : parent(n) {
        for (size_t i = 0; i < n; ++i) parent[i] = static_cast<int>(i);
    }
    int find(int i) { return parent[i] == i ? i : parent[i] = find(parent[i]); }
    void unite(int a, int b) { parent[find(a)] = find(b); }
};
}  // namespace detail

// Groups character boxes into lines by single-linkage clustering on vertical
// overlap: two boxes share a line when their y-intervals overlap by at least
// half the smaller box height. Within a line, reading order is by x-center.
inline ExtractResult extract_lines(const Image& page, const std::vector<CharBox>& boxes,
                                   const std::string& document_id) {
    ExtractResult res;
    if (boxes.empty()) return res;
    const size_t n = boxes.size();
    detail::UnionFind uf(n);
    for (size_t i = 0; i < n; ++i)
        for (size_t j = i + 1; j < n; ++j) {
            const auto& a = boxes[i];
            const auto& b = boxes[j];
            const double ov = std::min(a.y + a.h, b.y + b.h) - std::max(a.y, b.y);
            if (ov >= 0.5 * std::min(a.h, b.h)) uf.unite(static_cast<int>(i), static_cast<int>(j));
        }
    std::map<int, std::vector<size_t>> groups;
    for (size_t i = 0; i < n; ++i) groups[uf.find(static_cast<int>(i))].push_back(i);

    struct LineDraft {
        std::vector<size_t> members;
        double y0, y1, x0, x1;
    };
    std::vector<LineDraft> drafts;
    for (auto& [root, members] : groups) {
        LineDraft d;
        std::sort(members.begin(), members.end(), [&](size_t a, size_t b) {
            return boxes[a].x + boxes[a].w / 2 < boxes[b].x + boxes[b].w / 2;
        });
        d.members = members;
        d.x0 = d.y0 = 1e30;
        d.x1 = d.y1 = -1e30;
        for (size_t i : members) {
            d.x0 = std::min(d.x0, boxes[i].x);
            d.y0 = std::min(d.y0, boxes[i].y);
            d.x1 = std::max(d.x1, boxes[i].x + boxes[i].w);
            d.y1 = std::max(d.y1, boxes[i].y + boxes[i].h);
        }
        drafts.push_back(std::move(d));
    }
    std::sort(drafts.begin(), drafts.end(), [](const LineDraft& a, const LineDraft& b) {
        const double ac = (a.y0 + a.y1) / 2, bc = (b.y0 + b.y1) / 2;
        return ac != bc ? ac < bc : a.x0 < b.x0;
    });

    constexpr int kPad = 5;
    int idx = 0;
    for (const auto& d : drafts) {
        const int x0 = std::max(0, static_cast<int>(std::floor(d.x0)) - kPad);
        const int y0 = std::max(0, static_cast<int>(std::floor(d.y0)) - kPad);
        const int x1 = std::min(page.w, static_cast<int>(std::ceil(d.x1)) + kPad);
        const int y1 = std::min(page.h, static_cast<int>(std::ceil(d.y1)) + kPad);
        if (x1 <= x0 || y1 <= y0) throw DataError("extract_lines: box outside page");
        LineSample s;
        s.image = Image(y1 - y0, x1 - x0);
        for (int y = y0; y < y1; ++y)
            for (int x = x0; x < x1; ++x)
                for (int c = 0; c < 3; ++c) s.image.at(y - y0, x - x0, c) = page.at(y, x, c);
        for (size_t i : d.members) {
            auto canon = greek::canonicalize_transcription(boxes[i].letter);
            if (canon.letters.size() == 1)
                s.transcription.push_back(canon.letters[0]);
            else
                ++res.dropped_glyphs;
        }
        s.document_id = document_id;
        s.id = strf("%s-l%03d", document_id.c_str(), idx++);
        res.lines.push_back(std::move(s));
    }
    return res;
}

// ---------------------------------------------------------------------------
// Split / augment / statistics
// ---------------------------------------------------------------------------

inline uint64_t fnv1a(const std::string& s) {
    uint64_t h = 0xCBF29CE484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001B3ULL;
    }
    return h;
}

// Document-stratified split: every document with >= 2 lines lands in both
// splits; fractions hold to within one line per document.
inline std::pair<std::vector<LineSample>, std::vector<LineSample>> split_dataset(
    const std::vector<LineSample>& samples, double train_fraction = 0.8, uint64_t seed = 0) {
    if (samples.empty()) throw DataError("split_dataset: no samples");
    if (train_fraction < 0.0 || train_fraction > 1.0)
        throw ConfigError("split_dataset: train_fraction must be in [0,1]");
    std::map<std::string, std::vector<size_t>> by_doc;
    for (size_t i = 0; i < samples.size(); ++i) by_doc[samples[i].document_id].push_back(i);
    Rng master(seed);
    std::vector<LineSample> train, test;
    for (auto& [doc, idxs] : by_doc) {
        Rng r = master.child(fnv1a(doc));
        r.shuffle(idxs);
        const auto n = static_cast<int64_t>(idxs.size());
        int64_t n_test = static_cast<int64_t>(std::floor(static_cast<double>(n) * (1.0 - train_fraction)));
        if (n >= 2) n_test = std::clamp<int64_t>(n_test, 1, n - 1);
        for (int64_t i = 0; i < n; ++i) {
            LineSample s = samples[idxs[static_cast<size_t>(i)]];
            s.split_tag = i < n_test ? "test" : "train";
            (i < n_test ? test : train).push_back(std::move(s));
        }
    }
    return {std::move(train), std::move(test)};
}

// With probability `rate`, replaces all channels by the luminance channel.
inline Image augment_greyscale(const Image& img, double rate, Rng& rng) {
    if (rate < 0.0 || rate > 1.0) throw ConfigError("augment_greyscale: rate must be in [0,1]");
    if (rate > 0.0 && rng.uniform() < rate) return to_greyscale(img);
    return img;
}

inline std::array<int64_t, greek::kNumLetters> char_distribution(
    const std::vector<LineSample>& samples) {
    std::array<int64_t, greek::kNumLetters> hist{};
    for (const auto& s : samples)
        for (uint8_t k : s.transcription) ++hist[k];
    return hist;
}

// ---------------------------------------------------------------------------
// Manifest (JSONL, one record per line sample)
// ---------------------------------------------------------------------------

struct ManifestRecord {
    std::string image;  // path relative to the manifest location
    std::string doc;
    std::string text;   // canonical letters, UTF-8
    std::string split;  // "train" | "test"
};

inline void write_manifest(const std::string& path, const std::vector<ManifestRecord>& records) {
    std::filesystem::path p(path);
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    std::ofstream out(path);
    if (!out) throw IoError("cannot write manifest: " + path);
    for (const auto& r : records) {
        nlohmann::json j;
        j["image"] = r.image;
        j["doc"] = r.doc;
        j["text"] = r.text;
        j["split"] = r.split;
        out << j.dump() << "\n";
    }
}

inline std::vector<ManifestRecord> read_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read manifest: " + path);
    std::vector<ManifestRecord> records;
    std::set<std::string> seen;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded()) throw DataError("manifest: invalid JSON line in " + path);
        ManifestRecord r;
        r.image = j.value("image", "");
        r.doc = j.value("doc", "");
        r.text = j.value("text", "");
        r.split = j.value("split", "");
        if (r.image.empty()) throw DataError("manifest: record without image path");
        if (r.split != "train" && r.split != "test")
            throw DataError("manifest: split must be train|test, got '" + r.split + "'");
        if (!seen.insert(r.image).second) throw DataError("manifest: duplicate image path " + r.image);
        records.push_back(std::move(r));
    }
    return records;
}

// Writes sample images + manifest under out_dir; returns the records.
inline std::vector<ManifestRecord> save_dataset(const std::string& out_dir,
                                                const std::vector<LineSample>& samples) {
    namespace fs = std::filesystem;
    std::vector<ManifestRecord> records;
    records.reserve(samples.size());
    for (const auto& s : samples) {
        std::string name = s.id;
        std::replace(name.begin(), name.end(), '/', '_');
        ManifestRecord r;
        r.image = "images/" + s.split_tag + "/" + name + ".png";
        r.doc = s.document_id;
        r.text = greek::to_utf8(s.transcription);
        r.split = s.split_tag;
        save_png((fs::path(out_dir) / r.image).string(), s.image);
        records.push_back(std::move(r));
    }
    write_manifest((fs::path(out_dir) / "manifest.jsonl").string(), records);
    return records;
}

// Loads samples from a manifest; image paths resolve relative to the
// manifest location. Text must already be canonical.
inline std::vector<LineSample> load_samples(const std::string& manifest_path,
                                            bool with_images = true) {
    namespace fs = std::filesystem;
    const auto records = read_manifest(manifest_path);
    const fs::path base = fs::path(manifest_path).parent_path();
    std::vector<LineSample> samples;
    samples.reserve(records.size());
    for (const auto& r : records) {
        LineSample s;
        s.id = r.image;
        s.document_id = r.doc;
        s.split_tag = r.split;
        auto canon = greek::canonicalize_transcription(r.text);
        if (canon.removed > 0)
            throw DataError("manifest: non-canonical text for " + r.image);
        s.transcription = std::move(canon.letters);
        if (with_images) s.image = load_image((base / r.image).string());
        samples.push_back(std::move(s));
    }
    return samples;
}

// ---------------------------------------------------------------------------
// Procedural toy glyph bank (demo + test fixtures; the real bank is external)
// ---------------------------------------------------------------------------

// Letter identity comes from a per-letter random 6x6 block pattern (stable
// across banks); exemplar identity from jitter, tint and a stripe texture.
inline Image render_toy_glyph(int letter, int exemplar, uint64_t bank_seed) {
    std::array<std::array<bool, 6>, 6> grid{};
    Rng shape_rng(mix64(0xC1A55E5ULL, static_cast<uint64_t>(letter)));
    int on = 0;
    while (on < 12) {
        on = 0;
        for (auto& row : grid)
            for (auto& cell : row) {
                cell = shape_rng.uniform() < 0.45;
                on += cell ? 1 : 0;
            }
    }
    Rng ex(mix64(bank_seed, mix64(static_cast<uint64_t>(letter) * 1315423911ULL + 17,
                                  static_cast<uint64_t>(exemplar))));
    const int dx = static_cast<int>(ex.below(7)) - 3;
    const int dy = static_cast<int>(ex.below(7)) - 3;
    const double theta = ex.uniform() * 3.14159265358979312;
    const double freq = 0.05 + 0.15 * ex.uniform();
    const double phase = ex.uniform() * 6.28318530717958623;
    const int stripe_depth = 14 + static_cast<int>(ex.below(18));
    const int ink[3] = {25 + static_cast<int>(ex.below(50)), 25 + static_cast<int>(ex.below(50)),
                        25 + static_cast<int>(ex.below(50))};
    const int bg = 212 + static_cast<int>(ex.below(28));
    const double ct = std::cos(theta), st = std::sin(theta);

    Image img(kGlyphCell, kGlyphCell);
    for (int y = 0; y < kGlyphCell; ++y)
        for (int x = 0; x < kGlyphCell; ++x) {
            const int gy = std::clamp(y - dy, 0, kGlyphCell - 1) * 6 / kGlyphCell;
            const int gx = std::clamp(x - dx, 0, kGlyphCell - 1) * 6 / kGlyphCell;
            const bool inked = grid[static_cast<size_t>(gy)][static_cast<size_t>(gx)];
            const bool stripe = std::sin(6.28318530717958623 * freq * (x * ct + y * st) + phase) > 0;
            const int noise = static_cast<int>(ex.below(13)) - 6;
            for (int c = 0; c < 3; ++c) {
                const int v = inked ? ink[c] + noise : bg - (stripe ? stripe_depth : 0) + noise;
                img.at(y, x, c) = static_cast<uint8_t>(std::clamp(v, 0, 255));
            }
        }
    return img;
}

inline CharBank make_toy_bank(int exemplars_per_letter, uint64_t seed) {
    if (exemplars_per_letter < 1) throw DataError("make_toy_bank: need >= 1 exemplar per letter");
    CharBank bank;
    for (int k = 0; k < greek::kNumLetters; ++k)
        for (int e = 0; e < exemplars_per_letter; ++e) {
            CharBankEntry entry;
            entry.letter = k;
            entry.image = render_toy_glyph(k, e, seed);
            entry.source_id = strf("%s/toy%04d", greek::letters()[static_cast<size_t>(k)].c_str(), e);
            bank.add(std::move(entry));
        }
    return bank;
}

}  // namespace npap
