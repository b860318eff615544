#include <catch2/catch_amalgamated.hpp>

#include <filesystem>

#include "gradcheck.hpp"
#include "neuropapyri/batching.hpp"
#include "neuropapyri/model.hpp"

using namespace npap;
using ag::Var;

namespace {

ModelConfig tiny_config(int n_heads = 2, int embed = 4, int width = 3, int h = 12, int w = 20) {
    ModelConfig mc;
    mc.variant = "full";
    mc.backbone.topology = "stub2";
    mc.backbone.base_width = width;
    mc.n_heads = n_heads;
    mc.embed_dim = embed;
    mc.input_h = h;
    mc.input_w = w;
    mc.init_seed = 5;
    return mc;
}

template <class T>
Var<T> random_input(const ModelConfig& mc, int batch, uint64_t seed) {
    Rng rng(seed);
    Tensor<T> x({batch, 3, mc.input_h, mc.input_w});
    for (auto& v : x.data) v = static_cast<T>(rng.uniform());
    return Var<T>::constant(x);
}

}  // namespace

TEST_CASE("backbone shape contract: 70x700 -> 512x3x22 (frozen reference)") {
    ModelConfig mc;
    mc.variant = "no_attention";
    mc.backbone.topology = "resnet18";
    mc.backbone.base_width = 64;
    mc.embed_dim = 8;
    mc.init_seed = 2;
    NeuroPapyri<float> model(mc);
    model.set_training(false);
    ag::NoGradGuard ng;
    auto fmap = model.backbone_forward(random_input<float>(mc, 1, 3));
    REQUIRE(fmap.value().shape == Shape{1, 512, 3, 22});
}

TEST_CASE("backbone shape contract: 224x224 -> 512x7x7") {
    ModelConfig mc;
    mc.variant = "no_attention";
    mc.backbone.topology = "resnet18";
    mc.backbone.base_width = 64;
    mc.embed_dim = 8;
    mc.input_h = 224;
    mc.input_w = 224;
    mc.init_seed = 2;
    NeuroPapyri<float> model(mc);
    model.set_training(false);
    ag::NoGradGuard ng;
    auto fmap = model.backbone_forward(random_input<float>(mc, 1, 4));
    REQUIRE(fmap.value().shape == Shape{1, 512, 7, 7});
}

TEST_CASE("narrow resnet topologies follow the stride-32 schedule") {
    for (const char* topo : {"resnet18", "resnet10"}) {
        ModelConfig mc;
        mc.variant = "no_attention";
        mc.backbone.topology = topo;
        mc.backbone.base_width = 8;
        mc.embed_dim = 8;
        mc.init_seed = 2;
        NeuroPapyri<float> model(mc);
        model.set_training(false);
        ag::NoGradGuard ng;
        auto fmap = model.backbone_forward(random_input<float>(mc, 2, 5));
        REQUIRE(fmap.value().shape == Shape{2, 64, 3, 22});
    }
}

TEST_CASE("backbone inference is deterministic") {
    auto mc = tiny_config();
    NeuroPapyri<float> model(mc);
    model.set_training(false);
    ag::NoGradGuard ng;
    auto x = random_input<float>(mc, 1, 7);
    auto a = model.forward(x);
    auto b = model.forward(x);
    REQUIRE(a.embedding.value().data == b.embedding.value().data);
    REQUIRE(a.presence_logits.value().data == b.presence_logits.value().data);
}

TEST_CASE("attention head with zero projection: map is 0.5, feature is half the mean") {
    auto mc = tiny_config(1, 4, 3);
    NeuroPapyri<double> model(mc);
    model.set_training(false);
    ag::NoGradGuard ng;
    auto& head = model.heads()[0];
    head.proj.w.value().fill(0.0);
    head.proj.b.value().fill(0.0);
    auto x = random_input<double>(mc, 2, 9);
    auto fmap = model.backbone_forward(x);
    auto r = head.forward(fmap);
    for (double v : r.map.value().data) REQUIRE(v == 0.5);
    auto mean = ag::spatial_mean(fmap);
    for (int64_t i = 0; i < r.feat.value().numel(); ++i)
        REQUIRE_THAT(r.feat.value()[i], Catch::Matchers::WithinAbs(0.5 * mean.value()[i], 1e-12));
}

TEST_CASE("attention maps live in the open interval (0,1)") {
    auto mc = tiny_config(3);
    NeuroPapyri<float> model(mc);
    model.set_training(false);
    ag::NoGradGuard ng;
    auto out = model.forward(random_input<float>(mc, 2, 11));
    REQUIRE(out.maps.size() == 3);
    for (const auto& m : out.maps)
        for (float v : m.value().data) {
            REQUIRE(v > 0.0f);
            REQUIRE(v < 1.0f);
        }
}

TEST_CASE("pooling oracle: head feature equals the brute-force weighted mean") {
    auto mc = tiny_config(1, 4, 3);
    NeuroPapyri<float> model(mc);
    model.set_training(false);
    ag::NoGradGuard ng;
    auto x = random_input<float>(mc, 2, 13);
    auto fmap = model.backbone_forward(x);
    auto r = model.heads()[0].forward(fmap);
    const auto& f = fmap.value();
    const auto& m = r.map.value();
    const int64_t B = f.shape[0], C = f.shape[1], H = f.shape[2], W = f.shape[3];
    for (int64_t b = 0; b < B; ++b)
        for (int64_t c = 0; c < C; ++c) {
            double acc = 0.0;
            for (int64_t y = 0; y < H; ++y)
                for (int64_t x2 = 0; x2 < W; ++x2) acc += f.at(b, c, y, x2) * m.at(b, 0, y, x2);
            acc /= static_cast<double>(H * W);
            const double got = r.feat.value().at(b, c);
            REQUIRE_THAT(got, Catch::Matchers::WithinRel(acc, 1e-5));
        }
}

TEST_CASE("monotone attention: clamping the projection bias to -20 kills the feature") {
    auto mc = tiny_config(1, 4, 3);
    NeuroPapyri<double> model(mc);
    model.set_training(false);
    ag::NoGradGuard ng;
    auto& head = model.heads()[0];
    head.proj.w.value().fill(0.0);
    head.proj.b.value().fill(-20.0);
    auto x = random_input<double>(mc, 1, 15);
    auto fmap = model.backbone_forward(x);
    auto r = head.forward(fmap);
    auto mean = ag::spatial_mean(fmap);
    double feat_norm = 0.0, mean_norm = 0.0;
    for (int64_t i = 0; i < r.feat.value().numel(); ++i) {
        feat_norm += r.feat.value()[i] * r.feat.value()[i];
        mean_norm += mean.value()[i] * mean.value()[i];
    }
    REQUIRE(std::sqrt(feat_norm) <= 1e-7 * std::max(1.0, std::sqrt(mean_norm)));
}

TEST_CASE("aggregation: identity-initialized stack reduces to the rectifier") {
    // N=1 and N*C == D so the affine layers can hold the identity.
    auto mc = tiny_config(1, 6, 3);  // stub2 width 3 -> C=6, D=6
    NeuroPapyri<double> model(mc);
    model.set_training(false);
    ag::NoGradGuard ng;
    auto& agg = model.aggregation();
    agg.fc1.w.value().fill(0.0);
    agg.fc2.w.value().fill(0.0);
    for (int64_t i = 0; i < 6; ++i) {
        agg.fc1.w.value().at(i, i) = 1.0;
        agg.fc2.w.value().at(i, i) = 1.0;
    }
    agg.fc1.b.value().fill(0.0);
    agg.fc2.b.value().fill(0.0);
    auto x = random_input<double>(mc, 2, 17);
    auto out = model.forward(x);
    auto fmap = model.backbone_forward(x);
    auto r = model.heads()[0].forward(fmap);
    for (int64_t i = 0; i < out.embedding.value().numel(); ++i) {
        const double expect = std::max(0.0, r.feat.value()[i]);
        REQUIRE_THAT(out.embedding.value()[i], Catch::Matchers::WithinAbs(expect, 1e-12));
    }
}

TEST_CASE("head order matters: swapping head parameters changes the embedding") {
    auto mc = tiny_config(2, 4, 3);
    NeuroPapyri<float> model(mc);
    model.set_training(false);
    ag::NoGradGuard ng;
    auto x = random_input<float>(mc, 1, 19);
    auto before = model.forward(x).embedding.value();
    auto& heads = model.heads();
    std::swap(heads[0].proj.w.value(), heads[1].proj.w.value());
    std::swap(heads[0].proj.b.value(), heads[1].proj.b.value());
    std::swap(heads[0].out.w.value(), heads[1].out.w.value());
    std::swap(heads[0].out.b.value(), heads[1].out.b.value());
    auto after = model.forward(x).embedding.value();
    bool any_diff = false;
    for (int64_t i = 0; i < before.numel(); ++i)
        if (before[i] != after[i]) any_diff = true;
    REQUIRE(any_diff);
}

TEST_CASE("forward contract: shapes, batch independence, shape errors") {
    auto mc = tiny_config(3, 5, 2);
    NeuroPapyri<float> model(mc);
    model.set_training(false);
    ag::NoGradGuard ng;
    auto x2 = random_input<float>(mc, 2, 21);
    auto out = model.forward(x2);
    REQUIRE(out.presence_logits.value().shape == Shape{2, 3});
    REQUIRE(out.embedding.value().shape == Shape{2, 5});
    REQUIRE(out.maps.size() == 3);

    // row i depends only on image i
    Tensor<float> x1({1, 3, mc.input_h, mc.input_w});
    std::copy_n(x2.value().ptr(), x1.numel(), x1.ptr());
    auto out1 = model.forward(Var<float>::constant(x1));
    for (int64_t j = 0; j < 5; ++j)
        REQUIRE(out1.embedding.value().at(0, j) == out.embedding.value().at(0, j));

    Tensor<float> bad({1, 3, mc.input_h + 1, mc.input_w});
    REQUIRE_THROWS_AS(model.forward(Var<float>::constant(bad)), ShapeMismatchError);
}

TEST_CASE("default config embedding dimension is 256") {
    ModelConfig mc;
    mc.backbone.topology = "stub2";
    mc.backbone.base_width = 2;
    mc.input_h = 16;
    mc.input_w = 24;
    mc.n_heads = 2;
    mc.init_seed = 3;
    REQUIRE(mc.embed_dim == 256);
    NeuroPapyri<float> model(mc);
    model.set_training(false);
    ag::NoGradGuard ng;
    auto out = model.forward(random_input<float>(mc, 1, 23));
    REQUIRE(out.embedding.value().shape == Shape{1, 256});
}

TEST_CASE("full-stack gradient check on the stub backbone (frozen)") {
    auto mc = tiny_config(2, 4, 3);
    NeuroPapyri<double> model(mc);
    model.set_training(true);
    auto x = random_input<double>(mc, 2, 25);

    // attention + aggregation parameters only; the backbone stays frozen
    std::vector<Var<double>*> params;
    for (auto& [name, p] : model.param_map().params)
        if (name.rfind("backbone.", 0) != 0) params.push_back(p);
    REQUIRE(params.size() == 12);  // 2 heads x (proj w,b + out w,b) + agg (fc1,fc2 w,b)

    auto emb_loss = [&]() { return ag::sum_sq(model.forward(x).embedding); };
    auto stats = npap_test::check_gradients(params, emb_loss, 1e-6, 1e-4);
    REQUIRE(stats.checked > 0);

    for (int head = 0; head < 2; ++head) {
        auto logit_loss = [&]() { return ag::pick(model.forward(x).presence_logits, head); };
        npap_test::check_gradients(params, logit_loss, 1e-6, 1e-4);
    }
}

TEST_CASE("model config validation") {
    ModelConfig mc = tiny_config();
    mc.n_heads = 0;
    REQUIRE_THROWS_AS(mc.validate(), ConfigError);
    mc = tiny_config();
    mc.n_heads = 25;
    REQUIRE_THROWS_AS(mc.validate(), ConfigError);
    mc = tiny_config(2);
    mc.head_letters = {3};
    REQUIRE_THROWS_AS(mc.validate(), ConfigError);
    mc.head_letters = {3, 3};
    REQUIRE_THROWS_AS(mc.validate(), ConfigError);
    mc.head_letters = {3, 7};
    REQUIRE_NOTHROW(mc.validate());
}

TEST_CASE("checkpoint round trip preserves state and outputs bitwise") {
    namespace fs = std::filesystem;
    auto mc = tiny_config(2, 4, 3);
    mc.head_letters = {4, 0};  // epsilon, alpha
    NeuroPapyri<float> model(mc);
    model.set_training(false);
    ag::NoGradGuard ng;
    auto x = random_input<float>(mc, 1, 27);
    auto before = model.forward(x).embedding.value();

    const auto path = (fs::temp_directory_path() / "npap_test_ckpt.npk").string();
    save_checkpoint(path, model);
    auto loaded = load_checkpoint<float>(path);
    REQUIRE(loaded->config().n_heads == 2);
    REQUIRE(loaded->config().head_letters == std::vector<int>{4, 0});
    auto after = loaded->forward(x).embedding.value();
    REQUIRE(before.data == after.data);

    auto sd_a = model.state_dict();
    auto sd_b = loaded->state_dict();
    REQUIRE(sd_a.size() == sd_b.size());
    for (size_t i = 0; i < sd_a.size(); ++i) {
        REQUIRE(sd_a[i].first == sd_b[i].first);
        REQUIRE(sd_a[i].second.data == sd_b[i].second.data);
    }
    REQUIRE_THROWS_AS(load_checkpoint<double>(path), DataError);  // dtype mismatch
}

TEST_CASE("attention overlay export: dims, monotone peak, constant map") {
    Image src(20, 40, 100);
    Tensor<float> flat({3, 5}, 0.5f);
    Image tinted = render_attention_overlay(src, flat);
    REQUIRE(tinted.h == src.h);
    REQUIRE(tinted.w == src.w);
    // uniform map -> uniform overlay
    for (int y = 0; y < tinted.h; ++y)
        for (int x = 0; x < tinted.w; ++x) REQUIRE(tinted.at(y, x, 0) == tinted.at(0, 0, 0));

    Tensor<float> peaked({3, 5}, 0.01f);
    peaked.at(1, 2) = 0.99f;
    Image hot = render_attention_overlay(src, peaked);
    int by = 0, bx = 0;
    int best = -1;
    for (int y = 0; y < hot.h; ++y)
        for (int x = 0; x < hot.w; ++x)
            if (int(hot.at(y, x, 0)) > best) {
                best = hot.at(y, x, 0);
                by = y;
                bx = x;
            }
    // peak of the upsampled map sits at the center cell of the 3x5 grid
    REQUIRE(std::abs(by - 10) <= 4);
    REQUIRE(std::abs(bx - 20) <= 5);

    namespace fs = std::filesystem;
    const auto path = (fs::temp_directory_path() / "npap_test_overlay.png").string();
    export_attention_overlay(src, peaked, path);
    REQUIRE(fs::exists(path));
    Image back = load_image(path);
    REQUIRE(back.h == src.h);
    REQUIRE(back.w == src.w);
}
