#pragma once

// Ablation harness: three configurations trained on the same manifest with
// identical seeds and budgets, compared on leave-one-out retrieval.
//   (a) backbone-only      document-classification training, pooled features
//   (b) siamese            triplet training without the attention block
//   (c) siamese+attention  the full model, triplet training
// Expectation (qualitative): top1(c) >= top1(a); the report flags violations.

#include <nlohmann/json.hpp>

#include <set>
#include <string>
#include <vector>

#include "neuropapyri/retrieval.hpp"
#include "neuropapyri/training.hpp"

namespace npap {

struct AblationRow {
    std::string name;
    double top1 = 0.0;
    double f1_at_1 = 0.0;
    int64_t n_params = 0;
    bool has_attention_params = false;
    int best_epoch = 0;
};

struct AblationReport {
    std::vector<AblationRow> rows;
    bool trend_ok = false;
    std::string note;

    nlohmann::json to_json() const {
        nlohmann::json j;
        nlohmann::json rs = nlohmann::json::array();
        for (const auto& r : rows) {
            nlohmann::json e;
            e["config"] = r.name;
            e["top1"] = r.top1;
            e["f1_at_1"] = r.f1_at_1;
            e["n_params"] = r.n_params;
            e["has_attention_params"] = r.has_attention_params;
            e["best_epoch"] = r.best_epoch;
            rs.push_back(e);
        }
        j["rows"] = rs;
        j["trend_ok"] = trend_ok;
        j["note"] = note;
        return j;
    }
};

template <class T>
AblationReport run_ablation(const std::vector<LineSample>& train_set,
                            const std::vector<LineSample>& eval_set, ModelConfig base_model,
                            TrainConfig base_train,
                            std::vector<std::vector<CurveRow>>* curves_out = nullptr) {
    if (train_set.empty() || eval_set.empty()) throw DataError("run_ablation: empty train/eval set");
    std::set<std::string> docs;
    for (const auto& s : train_set) docs.insert(s.document_id);

    AblationReport report;
    report.note =
        "backbone-only trains a document-classification head (the baseline row gives no training "
        "objective, so classification over document ids is used) and retrieves with pooled "
        "backbone features; siamese rows train the cosine triplet objective.";

    auto eval_model = [&](NeuroPapyri<T>& model, const std::string& name, int best_epoch) {
        auto index = build_index(model, eval_set, base_train.batch_size);
        auto stats = leave_one_out(index);
        AblationRow row;
        row.name = name;
        row.top1 = stats.top1;
        row.f1_at_1 = stats.f1_macro;
        row.n_params = model.n_params();
        for (auto& [pname, p] : model.param_map().params)
            if (pname.rfind("heads.", 0) == 0) row.has_attention_params = true;
        row.best_epoch = best_epoch;
        report.rows.push_back(row);
    };

    {  // (a) backbone + classification on document labels
        ModelConfig mc = base_model;
        mc.variant = "classifier";
        mc.n_heads = base_model.n_heads;
        mc.head_letters.clear();
        mc.n_classes = static_cast<int>(docs.size());
        NeuroPapyri<T> model(mc);
        TrainConfig tc = base_train;
        tc.scheme = Scheme::DocClassifier;
        auto res = train(model, train_set, tc);
        if (curves_out) curves_out->push_back(res.curves);
        eval_model(model, "backbone-only", res.best_epoch);
    }
    {  // (b) Siamese triplet without the attention block
        ModelConfig mc = base_model;
        mc.variant = "no_attention";
        mc.head_letters.clear();
        mc.n_classes = 0;
        NeuroPapyri<T> model(mc);
        TrainConfig tc = base_train;
        tc.scheme = Scheme::TripletOnly;
        auto res = train(model, train_set, tc);
        if (curves_out) curves_out->push_back(res.curves);
        eval_model(model, "siamese", res.best_epoch);
    }
    {  // (c) full model
        ModelConfig mc = base_model;
        mc.variant = "full";
        mc.n_classes = 0;
        NeuroPapyri<T> model(mc);
        TrainConfig tc = base_train;
        tc.scheme = Scheme::TripletOnly;
        auto res = train(model, train_set, tc);
        if (curves_out) curves_out->push_back(res.curves);
        eval_model(model, "siamese+attention", res.best_epoch);
    }

    report.trend_ok = report.rows[2].top1 >= report.rows[0].top1;
    if (!report.trend_ok)
        report.note += " WARNING: top1(siamese+attention) < top1(backbone-only) on this fixture.";
    return report;
}

}  // namespace npap
