#pragma once

// The network: a residual convolutional backbone feeding N parallel
// attention heads (single-channel sigmoid map -> feature reweighting ->
// presence logit) whose pooled features are concatenated and passed through
// a two-layer feed-forward stage into the embedding.
//
// Variants:
//   full          backbone + attention heads + aggregation (the model)
//   no_attention  backbone + global mean pool + feed-forward embedding
//   classifier    backbone + global mean pool + document classification head
// The last two exist for the ablation study.

#include <nlohmann/json.hpp>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "neuropapyri/greek.hpp"
#include "neuropapyri/nn.hpp"

namespace npap {

using ag::Var;

struct BackboneSpec {
    std::string topology = "resnet18";  // resnet18 | resnet10 | stub2
    int base_width = 64;                // stage widths are {w, 2w, 4w, 8w}

    int out_channels() const {
        if (topology == "stub2") return base_width * 2;
        return base_width * 8;
    }
};

struct ModelConfig {
    std::string variant = "full";  // full | no_attention | classifier
    BackboneSpec backbone;
    int n_heads = 24;
    int embed_dim = 256;
    int input_h = 70;
    int input_w = 700;
    std::vector<int> head_letters;       // optional head->letter binding (canonical indices)
    int n_classes = 0;                   // classifier variant only
    std::string backbone_init = "random";
    uint64_t init_seed = 1;

    void validate() const {
        if (variant != "full" && variant != "no_attention" && variant != "classifier")
            throw ConfigError("ModelConfig: unknown variant '" + variant + "'");
        if (backbone.topology != "resnet18" && backbone.topology != "resnet10" &&
            backbone.topology != "stub2")
            throw ConfigError("ModelConfig: unknown backbone topology '" + backbone.topology + "'");
        if (backbone.base_width < 1) throw ConfigError("ModelConfig: base_width must be >= 1");
        if (n_heads < 1 || n_heads > greek::kNumLetters)
            throw ConfigError(strf("ModelConfig: n_heads must be in [1,%d]", greek::kNumLetters));
        if (embed_dim < 1) throw ConfigError("ModelConfig: embed_dim must be >= 1");
        if (input_h < 1 || input_w < 1) throw ConfigError("ModelConfig: bad input dims");
        if (!head_letters.empty()) {
            if (static_cast<int>(head_letters.size()) != n_heads)
                throw ConfigError("ModelConfig: head_letters length must equal n_heads");
            std::vector<bool> seen(greek::kNumLetters, false);
            for (int k : head_letters) {
                if (k < 0 || k >= greek::kNumLetters)
                    throw ConfigError("ModelConfig: head letter index out of range");
                if (seen[static_cast<size_t>(k)])
                    throw ConfigError("ModelConfig: duplicate head letter");
                seen[static_cast<size_t>(k)] = true;
            }
        }
        if (variant == "classifier" && n_classes < 2)
            throw ConfigError("ModelConfig: classifier variant needs n_classes >= 2");
    }
};

inline nlohmann::json model_config_to_json(const ModelConfig& c) {
    nlohmann::json j;
    j["variant"] = c.variant;
    j["topology"] = c.backbone.topology;
    j["base_width"] = c.backbone.base_width;
    j["n_heads"] = c.n_heads;
    j["embed_dim"] = c.embed_dim;
    j["input_h"] = c.input_h;
    j["input_w"] = c.input_w;
    nlohmann::json letters = nlohmann::json::array();
    for (int k : c.head_letters) letters.push_back(greek::letters()[static_cast<size_t>(k)]);
    j["head_letters"] = letters;
    j["n_classes"] = c.n_classes;
    j["backbone_init"] = c.backbone_init;
    j["init_seed"] = c.init_seed;
    return j;
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.variant = j.value("variant", "full");
    c.backbone.topology = j.value("topology", "resnet18");
    c.backbone.base_width = j.value("base_width", 64);
    c.n_heads = j.value("n_heads", 24);
    c.embed_dim = j.value("embed_dim", 256);
    c.input_h = j.value("input_h", 70);
    c.input_w = j.value("input_w", 700);
    c.head_letters.clear();
    if (j.contains("head_letters"))
        for (const auto& s : j["head_letters"]) {
            const int k = greek::letter_index(s.get<std::string>());
            if (k < 0) throw ConfigError("checkpoint: unknown head letter " + s.get<std::string>());
            c.head_letters.push_back(k);
        }
    c.n_classes = j.value("n_classes", 0);
    c.backbone_init = j.value("backbone_init", "random");
    c.init_seed = j.value("init_seed", 1);
    c.validate();
    return c;
}

// ---------------------------------------------------------------------------
// Backbone
// ---------------------------------------------------------------------------

template <class T>
struct BasicBlock {
    nn::Conv2d<T> conv1, conv2;
    nn::BatchNorm2d<T> bn1, bn2;
    bool has_down = false;
    nn::Conv2d<T> down_conv;
    nn::BatchNorm2d<T> down_bn;

    BasicBlock() = default;
    BasicBlock(int64_t in_c, int64_t out_c, int64_t stride, Rng& rng)
        : conv1(in_c, out_c, 3, stride, 1, false, rng),
          conv2(out_c, out_c, 3, 1, 1, false, rng),
          bn1(out_c),
          bn2(out_c) {
        if (stride != 1 || in_c != out_c) {
            has_down = true;
            down_conv = nn::Conv2d<T>(in_c, out_c, 1, stride, 0, false, rng);
            down_bn = nn::BatchNorm2d<T>(out_c);
        }
    }

    Var<T> forward(const Var<T>& x, bool training) {
        Var<T> y = ag::relu(bn1.forward(conv1.forward(x), training));
        y = bn2.forward(conv2.forward(y), training);
        Var<T> skip = has_down ? down_bn.forward(down_conv.forward(x), training) : x;
        return ag::relu(ag::add(y, skip));
    }

    void collect(const std::string& prefix, nn::ParamMap<T>& pm) {
        conv1.collect(prefix + ".conv1", pm);
        bn1.collect(prefix + ".bn1", pm);
        conv2.collect(prefix + ".conv2", pm);
        bn2.collect(prefix + ".bn2", pm);
        if (has_down) {
            down_conv.collect(prefix + ".downsample.0", pm);
            down_bn.collect(prefix + ".downsample.1", pm);
        }
    }
};

template <class T>
struct Backbone {
    BackboneSpec spec;
    int64_t out_channels = 0;

    // residual topologies
    nn::Conv2d<T> conv1;
    nn::BatchNorm2d<T> bn1;
    std::vector<std::vector<BasicBlock<T>>> stages;

    // 2-layer stub (gradient-check substitute)
    nn::Conv2d<T> stub1, stub2;

    Backbone() = default;
    Backbone(const BackboneSpec& s, Rng& rng) : spec(s), out_channels(s.out_channels()) {
        const int64_t w = s.base_width;
        if (s.topology == "stub2") {
            stub1 = nn::Conv2d<T>(3, w, 3, 2, 1, true, rng);
            stub2 = nn::Conv2d<T>(w, 2 * w, 3, 2, 1, true, rng);
            return;
        }
        const int blocks_per_stage = s.topology == "resnet10" ? 1 : 2;
        conv1 = nn::Conv2d<T>(3, w, 7, 2, 3, false, rng);
        bn1 = nn::BatchNorm2d<T>(w);
        int64_t in_c = w;
        for (int stage = 0; stage < 4; ++stage) {
            const int64_t out_c = w << stage;
            const int64_t stride = stage == 0 ? 1 : 2;
            std::vector<BasicBlock<T>> blocks;
            blocks.emplace_back(in_c, out_c, stride, rng);
            for (int b = 1; b < blocks_per_stage; ++b) blocks.emplace_back(out_c, out_c, 1, rng);
            stages.push_back(std::move(blocks));
            in_c = out_c;
        }
    }

    Var<T> forward(const Var<T>& x, bool training) {
        if (spec.topology == "stub2")
            return ag::relu(stub2.forward(ag::relu(stub1.forward(x))));
        Var<T> y = ag::relu(bn1.forward(conv1.forward(x), training));
        y = ag::maxpool2d(y, 3, 2, 1);
        for (auto& stage : stages)
            for (auto& block : stage) y = block.forward(y, training);
        return y;
    }

    void collect(const std::string& prefix, nn::ParamMap<T>& pm) {
        if (spec.topology == "stub2") {
            stub1.collect(prefix + ".stub1", pm);
            stub2.collect(prefix + ".stub2", pm);
            return;
        }
        conv1.collect(prefix + ".conv1", pm);
        bn1.collect(prefix + ".bn1", pm);
        for (size_t s = 0; s < stages.size(); ++s)
            for (size_t b = 0; b < stages[s].size(); ++b)
                stages[s][b].collect(prefix + strf(".layer%zu.%zu", s + 1, b), pm);
    }
};

// ---------------------------------------------------------------------------
// Attention head and aggregation
// ---------------------------------------------------------------------------

template <class T>
struct AttentionHead {
    nn::Conv2d<T> proj;  // C -> 1, 1x1: condenses the feature map into the attention map
    nn::Linear<T> out;   // pooled attended feature -> presence logit

    AttentionHead() = default;
    AttentionHead(int64_t channels, Rng& rng)
        : proj(channels, 1, 1, 1, 0, true, rng), out(channels, 1, rng) {}

    struct Result {
        Var<T> map;    // [B,1,H',W'], sigmoid-activated
        Var<T> feat;   // [B,C] spatial mean of the reweighted feature map
        Var<T> logit;  // [B,1]
    };

    Result forward(const Var<T>& fmap) {
        Result r;
        r.map = ag::sigmoid(proj.forward(fmap));
        r.feat = ag::spatial_mean(ag::mul_map(fmap, r.map));
        r.logit = out.forward(r.feat);
        return r;
    }

    void collect(const std::string& prefix, nn::ParamMap<T>& pm) {
        proj.collect(prefix + ".proj", pm);
        out.collect(prefix + ".out", pm);
    }
};

template <class T>
struct FeedForwardEmbed {
    nn::Linear<T> fc1, fc2;

    FeedForwardEmbed() = default;
    FeedForwardEmbed(int64_t in_dim, int64_t embed_dim, Rng& rng)
        : fc1(in_dim, embed_dim, rng), fc2(embed_dim, embed_dim, rng) {}

    Var<T> forward(const Var<T>& x) const { return fc2.forward(ag::relu(fc1.forward(x))); }

    void collect(const std::string& prefix, nn::ParamMap<T>& pm) {
        fc1.collect(prefix + ".fc1", pm);
        fc2.collect(prefix + ".fc2", pm);
    }
};

// ---------------------------------------------------------------------------
// The model
// ---------------------------------------------------------------------------

template <class T>
struct ForwardOut {
    Var<T> embedding;        // [B,D] (full/no_attention), [B,C] pooled (classifier)
    Var<T> presence_logits;  // [B,N] (full variant only)
    Var<T> class_logits;     // [B,K] (classifier variant only)
    std::vector<Var<T>> maps;  // per head, [B,1,H',W'] (full variant only)
};

template <class T>
class NeuroPapyri {
public:
    explicit NeuroPapyri(const ModelConfig& cfg) : cfg_(cfg) {
        cfg_.validate();
        Rng rng(cfg_.init_seed);
        backbone_ = Backbone<T>(cfg_.backbone, rng);
        const int64_t C = backbone_.out_channels;
        if (cfg_.variant == "full") {
            heads_.reserve(static_cast<size_t>(cfg_.n_heads));
            for (int i = 0; i < cfg_.n_heads; ++i) heads_.emplace_back(C, rng);
            agg_ = FeedForwardEmbed<T>(static_cast<int64_t>(cfg_.n_heads) * C, cfg_.embed_dim, rng);
        } else if (cfg_.variant == "no_attention") {
            agg_ = FeedForwardEmbed<T>(C, cfg_.embed_dim, rng);
        } else {
            classifier_ = nn::Linear<T>(C, cfg_.n_classes, rng);
        }
    }

    const ModelConfig& config() const { return cfg_; }
    void set_training(bool t) { training_ = t; }
    bool is_training() const { return training_; }
    int64_t feature_channels() const { return backbone_.out_channels; }

    ForwardOut<T> forward(const Var<T>& x) {
        const auto& s = x.value().shape;
        if (s.size() != 4 || s[1] != 3 || s[2] != cfg_.input_h || s[3] != cfg_.input_w)
            throw ShapeMismatchError("forward: input " + shape_str(s) +
                                     strf(" does not match configured [B,3,%d,%d]", cfg_.input_h,
                                          cfg_.input_w));
        ForwardOut<T> out;
        Var<T> fmap = backbone_.forward(x, training_);
        if (cfg_.variant == "full") {
            std::vector<Var<T>> feats, logits;
            feats.reserve(heads_.size());
            logits.reserve(heads_.size());
            for (auto& head : heads_) {
                auto r = head.forward(fmap);
                out.maps.push_back(r.map);
                feats.push_back(r.feat);
                logits.push_back(r.logit);
            }
            out.embedding = agg_.forward(ag::concat_cols(feats));
            out.presence_logits = ag::concat_cols(logits);
        } else if (cfg_.variant == "no_attention") {
            out.embedding = agg_.forward(ag::spatial_mean(fmap));
        } else {
            Var<T> pooled = ag::spatial_mean(fmap);
            out.embedding = pooled;
            out.class_logits = classifier_.forward(pooled);
        }
        return out;
    }

    // Backbone only: feature map [B,C,H',W'].
    Var<T> backbone_forward(const Var<T>& x) { return backbone_.forward(x, training_); }

    nn::ParamMap<T> param_map() {
        nn::ParamMap<T> pm;
        backbone_.collect("backbone", pm);
        if (cfg_.variant == "full") {
            for (size_t i = 0; i < heads_.size(); ++i) heads_[i].collect(strf("heads.%zu", i), pm);
            agg_.collect("agg", pm);
        } else if (cfg_.variant == "no_attention") {
            agg_.collect("embed", pm);
        } else {
            classifier_.collect("classifier", pm);
        }
        return pm;
    }

    std::vector<Var<T>*> trainable_params() {
        std::vector<Var<T>*> ps;
        for (auto& [name, p] : param_map().params) ps.push_back(p);
        return ps;
    }

    int64_t n_params() {
        int64_t n = 0;
        for (auto& [name, p] : param_map().params) n += p->value().numel();
        return n;
    }

    using StateDict = std::vector<std::pair<std::string, Tensor<T>>>;

    StateDict state_dict() {
        StateDict sd;
        auto pm = param_map();
        for (auto& [name, p] : pm.params) sd.emplace_back(name, p->value());
        for (auto& [name, b] : pm.buffers) sd.emplace_back(name, *b);
        return sd;
    }

    void load_state_dict(const StateDict& sd) {
        auto pm = param_map();
        std::map<std::string, const Tensor<T>*> src;
        for (const auto& [name, t] : sd) src[name] = &t;
        auto assign = [&](const std::string& name, Tensor<T>& dst) {
            auto it = src.find(name);
            if (it == src.end()) throw DataError("state dict missing tensor: " + name);
            if (it->second->shape != dst.shape)
                throw ShapeMismatchError("state tensor shape mismatch: " + name);
            dst = *it->second;
            src.erase(it);
        };
        for (auto& [name, p] : pm.params) assign(name, p->value());
        for (auto& [name, b] : pm.buffers) assign(name, *b);
        if (!src.empty()) throw DataError("state dict has unexpected tensor: " + src.begin()->first);
    }

    // Direct module access (tests and targeted initialization).
    Backbone<T>& backbone() { return backbone_; }
    std::vector<AttentionHead<T>>& heads() { return heads_; }
    FeedForwardEmbed<T>& aggregation() { return agg_; }
    nn::Linear<T>& classifier() { return classifier_; }

private:
    ModelConfig cfg_;
    Backbone<T> backbone_;
    std::vector<AttentionHead<T>> heads_;
    FeedForwardEmbed<T> agg_;
    nn::Linear<T> classifier_;
    bool training_ = true;
};

// ---------------------------------------------------------------------------
// Checkpoint: one archive = JSON header (config + tensor directory) + raw
// little-endian tensor payload.
// ---------------------------------------------------------------------------

namespace detail {
template <class T>
constexpr const char* dtype_name();
template <>
constexpr const char* dtype_name<float>() { return "f32"; }
template <>
constexpr const char* dtype_name<double>() { return "f64"; }
}  // namespace detail

inline constexpr char kCheckpointMagic[8] = {'N', 'P', 'A', 'P', 'C', 'K', 'P', '1'};

template <class T>
void save_checkpoint(const std::string& path, NeuroPapyri<T>& model) {
    auto sd = model.state_dict();
    nlohmann::json dir = nlohmann::json::array();
    uint64_t offset = 0;
    for (const auto& [name, t] : sd) {
        nlohmann::json e;
        e["name"] = name;
        e["shape"] = t.shape;
        e["offset"] = offset;
        e["nbytes"] = static_cast<uint64_t>(t.numel()) * sizeof(T);
        dir.push_back(e);
        offset += static_cast<uint64_t>(t.numel()) * sizeof(T);
    }
    nlohmann::json header;
    header["format"] = "npap-ckpt-v1";
    header["dtype"] = detail::dtype_name<T>();
    header["config"] = model_config_to_json(model.config());
    header["tensors"] = dir;
    const std::string hs = header.dump();

    std::filesystem::path p(path);
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write checkpoint: " + path);
    out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    const uint64_t hlen = hs.size();
    out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
    out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    for (const auto& [name, t] : sd)
        out.write(reinterpret_cast<const char*>(t.ptr()),
                  static_cast<std::streamsize>(t.numel() * static_cast<int64_t>(sizeof(T))));
    if (!out) throw IoError("checkpoint write failed: " + path);
}

template <class T>
std::unique_ptr<NeuroPapyri<T>> load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read checkpoint: " + path);
    char magic[8];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0)
        throw DataError("not a checkpoint file: " + path);
    uint64_t hlen = 0;
    in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
    std::string hs(hlen, '\0');
    in.read(hs.data(), static_cast<std::streamsize>(hlen));
    nlohmann::json header = nlohmann::json::parse(hs);
    if (header.value("dtype", "") != detail::dtype_name<T>())
        throw DataError("checkpoint dtype mismatch: " + header.value("dtype", "?"));
    ModelConfig cfg = model_config_from_json(header["config"]);
    auto model = std::make_unique<NeuroPapyri<T>>(cfg);
    typename NeuroPapyri<T>::StateDict sd;
    for (const auto& e : header["tensors"]) {
        Shape shape = e["shape"].get<Shape>();
        Tensor<T> t(shape);
        in.read(reinterpret_cast<char*>(t.ptr()),
                static_cast<std::streamsize>(t.numel() * static_cast<int64_t>(sizeof(T))));
        sd.emplace_back(e["name"].get<std::string>(), std::move(t));
    }
    if (!in) throw DataError("checkpoint payload truncated: " + path);
    model->load_state_dict(sd);
    model->set_training(false);
    return model;
}

}  // namespace npap
