// neuropapyri — dataset generation, ingestion, training, evaluation,
// ablation and attention-map export as subcommands over a flat key=value
// config contract. Every run writes a resolved-config snapshot; replaying
// the snapshot reproduces all non-timestamp outputs byte-identically.
//
// Exit codes: 0 success, 2 config error, 3 data error, 4 divergence.

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <set>

#include "neuropapyri/ablation.hpp"
#include "neuropapyri/config.hpp"
#include "neuropapyri/data.hpp"
#include "neuropapyri/model.hpp"
#include "neuropapyri/retrieval.hpp"
#include "neuropapyri/training.hpp"

namespace fs = std::filesystem;
using namespace npap;

namespace {

struct RunSpec {
    std::string config_path;
    std::vector<std::string> overrides;
    std::string out_dir;
};

FlatConfig prepare(const RunSpec& spec, const std::set<std::string>& allowed) {
    FlatConfig cfg = resolve_config(spec.config_path, spec.overrides);
    cfg.ensure_known(allowed);
    fs::create_directories(spec.out_dir);
    cfg.write_snapshot((fs::path(spec.out_dir) / "resolved.cfg").string());
    return cfg;
}

const std::set<std::string> kCommonKeys = {"seed"};

std::set<std::string> with_common(std::set<std::string> keys) {
    keys.insert(kCommonKeys.begin(), kCommonKeys.end());
    return keys;
}

// ---------------------------------------------------------------------------

int cmd_toy_bank(const RunSpec& spec) {
    auto cfg = prepare(spec, with_common({"exemplars_per_letter"}));
    const auto n = static_cast<int>(cfg.get_int("exemplars_per_letter", 18));
    const uint64_t seed = cfg.get_u64("seed", 0);
    CharBank bank = make_toy_bank(n, seed);
    write_char_bank(spec.out_dir, bank);
    std::cout << "toy bank: " << bank.size() << " glyphs (" << n << " per letter) -> " << spec.out_dir
              << "\n";
    return 0;
}

int cmd_synth_gen(const RunSpec& spec) {
    auto cfg = prepare(spec, with_common({"bank_dir", "mode", "n_train", "n_test", "n_chars",
                                          "n_docs", "lines_per_doc", "train_fraction"}));
    const std::string bank_dir = cfg.require_string("bank_dir");
    const std::string mode = cfg.get_string("mode", "split");
    const uint64_t seed = cfg.get_u64("seed", 0);
    const int n_chars = static_cast<int>(cfg.get_int("n_chars", 10));
    CharBank bank = load_char_bank(bank_dir);

    std::vector<LineSample> all;
    if (mode == "split") {
        auto ds = build_synthetic_dataset(bank, cfg.get_int("n_train", 32768),
                                          cfg.get_int("n_test", 1024), seed, n_chars);
        const auto audit = audit_leakage(ds.train, ds.test);
        nlohmann::json ar;
        ar["train_sources"] = audit.train_sources;
        ar["test_sources"] = audit.test_sources;
        ar["shared_sources"] = audit.shared;
        ar["shared_examples"] = audit.shared_examples;
        std::ofstream lr(fs::path(spec.out_dir) / "leakage_report.json");
        lr << ar.dump(2) << "\n";
        if (audit.shared != 0) throw DataError("synthetic build leaked glyphs across splits");
        all = std::move(ds.train);
        all.insert(all.end(), std::make_move_iterator(ds.test.begin()),
                   std::make_move_iterator(ds.test.end()));
    } else if (mode == "pseudo-docs") {
        auto lines = build_pseudo_documents(bank, static_cast<int>(cfg.get_int("n_docs", 10)),
                                            static_cast<int>(cfg.get_int("lines_per_doc", 30)),
                                            seed, n_chars);
        auto [train, test] = split_dataset(lines, cfg.get_double("train_fraction", 0.8),
                                           mix64(seed, 0x5711ULL));
        all = std::move(train);
        all.insert(all.end(), std::make_move_iterator(test.begin()),
                   std::make_move_iterator(test.end()));
    } else {
        throw ConfigError("synth-gen: mode must be split|pseudo-docs");
    }
    auto records = save_dataset(spec.out_dir, all);
    std::cout << "synth-gen: " << records.size() << " line images -> " << spec.out_dir << "\n";
    return 0;
}

int cmd_ingest(const RunSpec& spec) {
    auto cfg = prepare(spec, with_common({"pages_dir", "train_fraction"}));
    const std::string pages_dir = cfg.require_string("pages_dir");
    const double train_fraction = cfg.get_double("train_fraction", 0.8);
    const uint64_t seed = cfg.get_u64("seed", 0);
    if (!fs::is_directory(pages_dir)) throw IoError("pages directory not found: " + pages_dir);

    std::vector<fs::path> pages;
    for (const auto& e : fs::directory_iterator(pages_dir)) {
        const auto ext = e.path().extension().string();
        if (e.is_regular_file() && (ext == ".png" || ext == ".jpg" || ext == ".jpeg"))
            pages.push_back(e.path());
    }
    std::sort(pages.begin(), pages.end());

    std::vector<LineSample> lines;
    int64_t dropped = 0;
    for (const auto& page_path : pages) {
        fs::path ann_path = page_path;
        ann_path.replace_extension(".json");
        if (!fs::exists(ann_path)) continue;
        std::ifstream in(ann_path);
        nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
        if (j.is_discarded() || !j.is_array())
            throw DataError("annotation file is not a JSON list: " + ann_path.string());
        std::vector<CharBox> boxes;
        for (const auto& e : j) {
            CharBox b;
            const auto bb = e.at("bbox");
            b.x = bb.at(0).get<double>();
            b.y = bb.at(1).get<double>();
            b.w = bb.at(2).get<double>();
            b.h = bb.at(3).get<double>();
            b.letter = e.at("letter").get<std::string>();
            b.quality = e.value("quality", "");
            boxes.push_back(std::move(b));
        }
        // Document id: page stem, with a trailing "__<page>" suffix split off
        // so multi-page documents share one id.
        std::string doc = page_path.stem().string();
        if (const auto sep = doc.find("__"); sep != std::string::npos) doc.resize(sep);
        Image page = load_image(page_path.string());
        auto ext = extract_lines(page, boxes, doc);
        dropped += ext.dropped_glyphs;
        // ids must be unique across pages of the same document
        for (auto& s : ext.lines) s.id = page_path.stem().string() + "-" + s.id;
        lines.insert(lines.end(), std::make_move_iterator(ext.lines.begin()),
                     std::make_move_iterator(ext.lines.end()));
    }

    std::vector<ManifestRecord> records;
    if (!lines.empty()) {
        auto [train, test] = split_dataset(lines, train_fraction, seed);
        std::vector<LineSample> all = std::move(train);
        all.insert(all.end(), std::make_move_iterator(test.begin()),
                   std::make_move_iterator(test.end()));
        records = save_dataset(spec.out_dir, all);
    } else {
        write_manifest((fs::path(spec.out_dir) / "manifest.jsonl").string(), {});
    }
    std::cout << "ingest: " << records.size() << " lines from " << pages.size() << " pages ("
              << dropped << " non-canonical glyphs dropped) -> " << spec.out_dir << "\n";
    return 0;
}

ModelConfig model_config_from(const FlatConfig& cfg, uint64_t seed) {
    ModelConfig mc;
    mc.backbone.topology = cfg.get_string("backbone", "resnet18");
    mc.backbone.base_width = static_cast<int>(cfg.get_int("base_width", 64));
    mc.n_heads = static_cast<int>(cfg.get_int("n_heads", 24));
    mc.embed_dim = static_cast<int>(cfg.get_int("embed_dim", 256));
    mc.input_h = static_cast<int>(cfg.get_int("input_h", 70));
    mc.input_w = static_cast<int>(cfg.get_int("input_w", 700));
    mc.backbone_init = "random";  // no pretrained weights ship with this tool
    mc.init_seed = mix64(seed, 0x111ULL);
    return mc;
}

TrainConfig train_config_from(const FlatConfig& cfg, uint64_t seed, Scheme scheme) {
    TrainConfig tc;
    tc.scheme = scheme;
    tc.learning_rate = cfg.get_double("learning_rate", scheme == Scheme::AttentionOnly ? 5e-5 : 1e-4);
    tc.batch_size = static_cast<int>(cfg.get_int("batch_size", scheme == Scheme::AttentionOnly ? 16 : 32));
    tc.max_epochs = static_cast<int>(cfg.get_int("max_epochs", scheme == Scheme::AttentionOnly ? 18 : 50));
    tc.margin = cfg.get_double("margin", 0.2);
    tc.weights.w1 = cfg.get_double("w1", 0.5);
    tc.weights.w2 = cfg.get_double("w2", 1.0 - tc.weights.w1);
    tc.augment_rate = cfg.get_double("augment_rate", 0.0);
    tc.val_fraction = cfg.get_double("val_fraction", 0.1);
    tc.steps_per_epoch = static_cast<int>(cfg.get_int("steps_per_epoch", 0));
    tc.seed = mix64(seed, 0x222ULL);
    return tc;
}

const std::set<std::string> kTrainKeys = {
    "manifest", "scheme", "n_heads", "head_letters", "backbone", "base_width", "embed_dim",
    "input_h", "input_w", "learning_rate", "batch_size", "max_epochs", "margin", "w1", "w2",
    "augment_rate", "val_fraction", "steps_per_epoch"};

int cmd_train(const RunSpec& spec) {
    auto cfg = prepare(spec, with_common(kTrainKeys));
    const uint64_t seed = cfg.get_u64("seed", 0);
    const Scheme scheme = scheme_from_name(cfg.get_string("scheme", "attention-only"));
    auto samples = load_samples(cfg.require_string("manifest"));
    std::vector<LineSample> train_set;
    for (auto& s : samples)
        if (s.split_tag == "train") train_set.push_back(std::move(s));
    if (train_set.empty()) throw DataError("train: manifest has no train split");

    ModelConfig mc = model_config_from(cfg, seed);
    const bool wants_attention = scheme == Scheme::AttentionOnly || scheme == Scheme::Dual;
    if (wants_attention) {
        mc.head_letters = cfg.get_letters("head_letters");
        if (mc.head_letters.empty()) mc.head_letters = assign_heads(train_set, mc.n_heads);
        mc.n_heads = static_cast<int>(mc.head_letters.size());
    }
    NeuroPapyri<float> model(mc);

    TrainConfig tc = train_config_from(cfg, seed, scheme);
    auto res = train(model, train_set, tc);

    write_curves_csv((fs::path(spec.out_dir) / "curves.csv").string(), res.curves);
    save_checkpoint((fs::path(spec.out_dir) / "checkpoint.npk").string(), model);
    std::cout << "train: scheme=" << scheme_name(scheme) << " epochs=" << res.epochs_run
              << " best_epoch=" << res.best_epoch << " best_val=" << res.best_val
              << (res.diverged ? " DIVERGED" : "") << "\n";
    if (res.diverged) throw DivergenceError("training loss became non-finite");
    return 0;
}

// Reorders head-major logits/labels into canonical letter order (24 heads).
void canonical_order(const std::vector<int>& head_letters, const Tensor<float>& logits,
                     const Tensor<float>& labels, Tensor<float>& c_logits, Tensor<float>& c_labels) {
    const int64_t B = logits.shape[0];
    c_logits = Tensor<float>({B, greek::kNumLetters});
    c_labels = Tensor<float>({B, greek::kNumLetters});
    for (int64_t i = 0; i < static_cast<int64_t>(head_letters.size()); ++i) {
        const int64_t k = head_letters[static_cast<size_t>(i)];
        for (int64_t b = 0; b < B; ++b) {
            c_logits.at(b, k) = logits.at(b, i);
            c_labels.at(b, k) = labels.at(b, i);
        }
    }
}

int cmd_eval(const RunSpec& spec) {
    auto cfg = prepare(spec, with_common({"checkpoint", "manifest", "eval_split", "batch_size",
                                          "save_embeddings"}));
    auto model = load_checkpoint<float>(cfg.require_string("checkpoint"));
    const std::string split = cfg.get_string("eval_split", "test");
    const int batch = static_cast<int>(cfg.get_int("batch_size", 16));
    auto samples = load_samples(cfg.require_string("manifest"));
    std::vector<LineSample> eval_set;
    for (auto& s : samples)
        if (split == "all" || s.split_tag == split) eval_set.push_back(std::move(s));
    if (eval_set.empty()) throw EmptyIndexError("eval: no samples in split '" + split + "'");

    MetricsReport report;

    std::set<std::string> docs;
    for (const auto& s : eval_set) docs.insert(s.document_id);
    if (docs.size() >= 2) {
        auto index = build_index(*model, eval_set, batch);
        if (cfg.has("save_embeddings"))
            save_index_jsonl(cfg.require_string("save_embeddings"), index);
        auto st = leave_one_out(index);
        report.top1 = st.top1;
        report.f1_at_1 = st.f1_macro;
        report.f1_at_1_micro = st.f1_micro;
        report.per_document_f1 = st.per_document_f1;
        report.skipped_queries = st.skipped_queries;
        report.degenerate_ties = st.degenerate_ties;
    }

    const auto& mc = model->config();
    if (mc.variant == "full" && !mc.head_letters.empty()) {
        auto logits = collect_presence_logits(*model, eval_set, batch);
        std::vector<size_t> all(eval_set.size());
        for (size_t i = 0; i < all.size(); ++i) all[i] = i;
        auto labels = presence_labels<float>(eval_set, all, mc.head_letters);
        auto m = char_id_metrics(logits, labels);
        report.char_precision = m.precision;
        report.char_recall = m.recall;
        report.char_f1 = m.f1;
        if (mc.n_heads == greek::kNumLetters) {
            Tensor<float> cl, cy;
            canonical_order(mc.head_letters, logits, labels, cl, cy);
            report.per_letter = per_letter_rate(cl, cy);
        }
    }

    std::ofstream rp(fs::path(spec.out_dir) / "report.json");
    rp << report.to_json().dump(2) << "\n";
    std::ofstream pl(fs::path(spec.out_dir) / "per_letter.csv");
    pl << "letter,rate\n";
    for (int k = 0; k < greek::kNumLetters; ++k) {
        pl << greek::letters()[static_cast<size_t>(k)] << ",";
        if (report.per_letter[static_cast<size_t>(k)])
            pl << strf("%.9g", *report.per_letter[static_cast<size_t>(k)]);
        pl << "\n";
    }
    std::cout << "eval: " << report.to_json().dump() << "\n";
    return 0;
}

int cmd_ablate(const RunSpec& spec) {
    auto cfg = prepare(spec, with_common({"manifest", "backbone", "base_width", "embed_dim",
                                          "input_h", "input_w", "n_heads", "learning_rate",
                                          "batch_size", "max_epochs", "margin", "val_fraction",
                                          "steps_per_epoch", "augment_rate"}));
    const uint64_t seed = cfg.get_u64("seed", 0);
    auto samples = load_samples(cfg.require_string("manifest"));
    std::vector<LineSample> train_set, eval_set;
    for (auto& s : samples)
        (s.split_tag == "train" ? train_set : eval_set).push_back(std::move(s));
    if (train_set.empty() || eval_set.empty())
        throw DataError("ablate: manifest needs both train and test splits");

    ModelConfig mc = model_config_from(cfg, seed);
    TrainConfig tc = train_config_from(cfg, seed, Scheme::TripletOnly);
    std::vector<std::vector<CurveRow>> curves;
    auto report = run_ablation<float>(train_set, eval_set, mc, tc, &curves);
    static const char* names[] = {"backbone-only", "siamese", "siamese_attention"};
    for (size_t i = 0; i < curves.size(); ++i)
        write_curves_csv((fs::path(spec.out_dir) / strf("curves_%s.csv", names[i])).string(),
                         curves[i]);
    std::ofstream rp(fs::path(spec.out_dir) / "ablation.json");
    rp << report.to_json().dump(2) << "\n";
    std::cout << "ablate: " << report.to_json().dump() << "\n";
    return 0;
}

int cmd_attention_export(const RunSpec& spec) {
    auto cfg = prepare(spec, with_common({"checkpoint", "manifest", "eval_split", "max_images"}));
    auto model = load_checkpoint<float>(cfg.require_string("checkpoint"));
    if (model->config().variant != "full")
        throw ConfigError("attention-export needs a full-variant checkpoint");
    const std::string split = cfg.get_string("eval_split", "test");
    const auto max_images = cfg.get_int("max_images", 8);
    auto samples = load_samples(cfg.require_string("manifest"));
    std::vector<LineSample> chosen;
    for (auto& s : samples) {
        if (split != "all" && s.split_tag != split) continue;
        chosen.push_back(std::move(s));
        if (static_cast<int64_t>(chosen.size()) >= max_images) break;
    }
    if (chosen.empty()) throw DataError("attention-export: no images selected");

    const auto& mc = model->config();
    ag::NoGradGuard ng;
    int64_t files = 0;
    for (const auto& s : chosen) {
        Image input = s.image.h == mc.input_h && s.image.w == mc.input_w
                          ? s.image
                          : standardize_line(s.image, mc.input_h, mc.input_w);
        std::vector<const Image*> one = {&input};
        auto out = model->forward(Var<float>::constant(to_float_batch<float>(one)));
        std::string stem = s.id;
        for (auto& c : stem)
            if (c == '/' || c == '\\' || c == '.') c = '_';
        for (int i = 0; i < mc.n_heads; ++i) {
            const auto& mv = out.maps[static_cast<size_t>(i)].value();  // [1,1,H',W']
            Tensor<float> map2d({mv.shape[2], mv.shape[3]});
            std::copy_n(mv.ptr(), mv.numel(), map2d.ptr());
            const std::string letter =
                mc.head_letters.empty()
                    ? strf("h%02d", i)
                    : strf("h%02d_%s", i,
                           greek::letters()[static_cast<size_t>(mc.head_letters[static_cast<size_t>(i)])]
                               .c_str());
            const auto path = fs::path(spec.out_dir) / strf("%s_%s.png", stem.c_str(), letter.c_str());
            export_attention_overlay(input, map2d, path.string());
            ++files;
        }
    }
    std::cout << "attention-export: wrote " << files << " overlays -> " << spec.out_dir << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"NeuroPapyri: attention-based line embeddings for papyrus document retrieval"};
    app.require_subcommand(1);

    RunSpec spec;
    auto add_common = [&spec](CLI::App* sub) {
        sub->add_option("--config", spec.config_path, "flat key=value config file");
        sub->add_option("--set", spec.overrides, "override: key=value (highest precedence)");
        sub->add_option("--out", spec.out_dir, "output directory")->required();
    };

    auto* toy = app.add_subcommand("toy-bank", "generate a procedural glyph bank (demo/testing)");
    auto* synth = app.add_subcommand("synth-gen", "build a synthetic line dataset from a glyph bank");
    auto* ingest = app.add_subcommand("ingest", "extract annotated page images into a line manifest");
    auto* train = app.add_subcommand("train", "train a model on a manifest");
    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint (retrieval + char-id metrics)");
    auto* ablate = app.add_subcommand("ablate", "train/compare the three ablation configurations");
    auto* aexp = app.add_subcommand("attention-export", "export attention heatmap overlays");
    for (auto* sub : {toy, synth, ingest, train, eval, ablate, aexp}) add_common(sub);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 2;
    }

    try {
        if (toy->parsed()) return cmd_toy_bank(spec);
        if (synth->parsed()) return cmd_synth_gen(spec);
        if (ingest->parsed()) return cmd_ingest(spec);
        if (train->parsed()) return cmd_train(spec);
        if (eval->parsed()) return cmd_eval(spec);
        if (ablate->parsed()) return cmd_ablate(spec);
        if (aexp->parsed()) return cmd_attention_export(spec);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const DivergenceError& e) {
        std::cerr << "divergence: " << e.what() << "\n";
        return 4;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
    return 0;
}
