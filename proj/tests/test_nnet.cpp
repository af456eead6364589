#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <numeric>

#include "psonet/errors.hpp"
#include "psonet/nnet.hpp"
#include "psonet/rng.hpp"
#include "test_util.hpp"

using namespace psonet;
using namespace psonet::nnet;

namespace {

ModelConfig tiny_config(int k = 16, int side = 64) {
    ModelConfig config;
    config.encoder.base_width = k;
    config.encoder.input_height = side;
    config.encoder.input_width = side;
    return config;
}

ImageF random_image(int side, Rng& rng) {
    ImageF img = ImageF::zeros(3, side, side);
    for (auto& v : img.values) v = rng.uniform(-1.5, 1.5);
    return img;
}

dataio::RegionalImageSet make_set(pasi::RegionId region, int n_valid, int side, Rng& rng) {
    dataio::RegionalImageSet set;
    set.region = region;
    const int capacity = pasi::region_image_count(region);
    set.images.assign(capacity, ImageF::zeros(3, side, side));
    set.valid.assign(capacity, false);
    set.sources.assign(capacity, dataio::ImageRecord{});
    for (int i = 0; i < n_valid; ++i) {
        set.images[i] = random_image(side, rng);
        set.valid[i] = true;
    }
    return set;
}

} // namespace

TEST_CASE("init is deterministic and shaped by the config") {
    auto config = tiny_config();
    auto a = init_params(config, 11);
    auto b = init_params(config, 11);
    auto a_named = collect_named_tensors(a);
    auto b_named = collect_named_tensors(b);
    REQUIRE(a_named.size() == b_named.size());
    for (size_t i = 0; i < a_named.size(); ++i) {
        CHECK(a_named[i].first == b_named[i].first);
        CHECK(a_named[i].second->data == b_named[i].second->data);
    }

    auto c = init_params(config, 12);
    CHECK(collect_named_tensors(c)[0].second->data != a_named[0].second->data);

    // K=16: feature dim 128, head input width = embed dim 768.
    const auto& hn = a.regions[0];
    CHECK(hn.embed.in_dim == 128);
    CHECK(hn.embed.out_dim == 768);
    CHECK(hn.head.in_dim == 768);
}

TEST_CASE("encoder produces the staged geometry") {
    Rng rng(1);

    SUBCASE("224x224 with K=96 ends at 7x7x768") {
        auto params = init_params(tiny_config(96, 224), 1);
        auto img = random_image(224, rng);
        auto feature = encode(img, params.regions[0].encoder);
        CHECK(feature.spatial.shape == std::vector<size_t>{768, 7, 7});
        CHECK(feature.pooled.size() == 768);
    }
    SUBCASE("64x64 with K=16 ends at 2x2x128") {
        auto params = init_params(tiny_config(16, 64), 1);
        auto img = random_image(64, rng);
        auto feature = encode(img, params.regions[0].encoder);
        CHECK(feature.spatial.shape == std::vector<size_t>{128, 2, 2});
    }
    SUBCASE("zero image through a zero-parameter encoder stays zero") {
        auto params = init_params(tiny_config(8, 64), 1);
        for (auto& conv : params.regions[0].encoder.convs) {
            conv.weight.fill(0.0);
            conv.bias.fill(0.0);
        }
        auto feature = encode(ImageF::zeros(3, 64, 64), params.regions[0].encoder);
        for (double v : feature.pooled) CHECK(v == 0.0);
        for (double v : feature.spatial.data) CHECK(v == 0.0);
    }
    SUBCASE("channel mismatch is rejected") {
        auto params = init_params(tiny_config(8, 64), 1);
        CHECK_THROWS_AS(encode(ImageF::zeros(1, 64, 64), params.regions[0].encoder),
                        ValidationError);
    }
}

TEST_CASE("embedding layer") {
    auto params = init_params(tiny_config(96, 64), 2);
    const auto& embed_layer = params.regions[0].embed;
    CHECK(embed_layer.in_dim == 768);
    CHECK(embed_layer.out_dim == 768);

    SUBCASE("zero input with zero bias gives a zero embedding") {
        ImageFeature feature;
        feature.pooled.assign(768, 0.0);
        auto e = embed(feature, embed_layer);
        for (double v : e) CHECK(v == 0.0);
    }
    SUBCASE("finite input stays finite") {
        Rng rng(4);
        for (int trial = 0; trial < 20; ++trial) {
            ImageFeature feature;
            feature.pooled.resize(768);
            for (auto& v : feature.pooled) v = rng.uniform(-3, 3);
            for (double v : embed(feature, embed_layer)) CHECK(std::isfinite(v));
        }
    }
    SUBCASE("width mismatch throws") {
        ImageFeature feature;
        feature.pooled.assign(100, 0.0);
        CHECK_THROWS_AS(embed(feature, embed_layer), ValidationError);
    }
}

TEST_CASE("attention pooling contract") {
    auto params = init_params(tiny_config(8, 64), 3);
    const auto& attn = params.regions[0].attention;
    const int dim = params.config.embed_dim;
    Rng rng(9);

    SUBCASE("single valid slot takes all the weight") {
        std::vector<std::vector<double>> embeddings(1, std::vector<double>(dim));
        for (auto& v : embeddings[0]) v = rng.uniform(-1, 1);
        auto out = attention_pool(embeddings, {true}, attn);
        CHECK(out.weights[0] == doctest::Approx(1.0).epsilon(1e-12));
        for (int d = 0; d < dim; ++d) {
            CHECK(out.pooled[d] == doctest::Approx(embeddings[0][d]).epsilon(1e-12));
        }
    }
    SUBCASE("identical embeddings share weight uniformly") {
        std::vector<double> e(dim);
        for (auto& v : e) v = rng.uniform(-1, 1);
        std::vector<std::vector<double>> embeddings(10, e);
        auto out = attention_pool(embeddings, std::vector<bool>(10, true), attn);
        for (double w : out.weights) CHECK(w == doctest::Approx(0.1).epsilon(1e-9));
    }
    SUBCASE("masked slots get exactly zero weight and the simplex holds") {
        std::vector<std::vector<double>> embeddings(6);
        std::vector<bool> valid(6, false);
        for (int i : {0, 2, 5}) {
            embeddings[i].resize(dim);
            for (auto& v : embeddings[i]) v = rng.uniform(-1, 1);
            valid[i] = true;
        }
        auto out = attention_pool(embeddings, valid, attn);
        CHECK(out.weights[1] == 0.0);
        CHECK(out.weights[3] == 0.0);
        CHECK(out.weights[4] == 0.0);
        double sum = 0.0;
        for (double w : out.weights) {
            CHECK(w >= 0.0);
            sum += w;
        }
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
    }
    SUBCASE("permuting inputs permutes weights and keeps the pool") {
        std::vector<std::vector<double>> embeddings(5, std::vector<double>(dim));
        for (auto& e : embeddings) {
            for (auto& v : e) v = rng.uniform(-1, 1);
        }
        auto base = attention_pool(embeddings, std::vector<bool>(5, true), attn);

        std::vector<size_t> perm = {3, 0, 4, 1, 2};
        std::vector<std::vector<double>> permuted(5);
        for (size_t i = 0; i < 5; ++i) permuted[i] = embeddings[perm[i]];
        auto shuffled = attention_pool(permuted, std::vector<bool>(5, true), attn);

        for (size_t i = 0; i < 5; ++i) {
            CHECK(shuffled.weights[i] == doctest::Approx(base.weights[perm[i]]).epsilon(1e-9));
        }
        for (int d = 0; d < dim; ++d) {
            CHECK(shuffled.pooled[d] == doctest::Approx(base.pooled[d]).epsilon(1e-6));
        }
    }
    SUBCASE("all-masked input is an error") {
        std::vector<std::vector<double>> embeddings(3);
        CHECK_THROWS_AS(attention_pool(embeddings, std::vector<bool>(3, false), attn),
                        ValidationError);
    }
}

TEST_CASE("regional forward obeys mask, range and duplication rules") {
    Rng rng(21);
    auto params = init_params(tiny_config(8, 32), 5);

    SUBCASE("full head-neck set gives one score and 12 weights") {
        auto set = make_set(pasi::RegionId::HeadNeck, 12, 32, rng);
        auto out = regional_forward(set, params.regions[0]);
        CHECK(out.score.value >= 0.0);
        CHECK(out.score.value <= 72.0);
        CHECK(out.attention.weights.size() == 12);
    }
    SUBCASE("masked slots keep exactly zero weight") {
        auto set = make_set(pasi::RegionId::HeadNeck, 5, 32, rng);
        auto out = regional_forward(set, params.regions[0]);
        for (size_t i = 5; i < 12; ++i) CHECK(out.attention.weights[i] == 0.0);
    }
    SUBCASE("duplicating every image halves weights and keeps the score") {
        auto set = make_set(pasi::RegionId::HeadNeck, 5, 32, rng);
        auto base = regional_forward(set, params.regions[0]);

        auto doubled = set;
        for (int i = 0; i < 5; ++i) {
            doubled.images[5 + i] = set.images[i];
            doubled.valid[5 + i] = true;
        }
        auto out = regional_forward(doubled, params.regions[0]);
        for (int i = 0; i < 5; ++i) {
            CHECK(out.attention.weights[i] ==
                  doctest::Approx(base.attention.weights[i] / 2.0).epsilon(1e-9));
        }
        CHECK(out.score.value == doctest::Approx(base.score.value).epsilon(1e-6));
        for (size_t d = 0; d < out.attention.pooled.size(); ++d) {
            CHECK(out.attention.pooled[d] ==
                  doctest::Approx(base.attention.pooled[d]).epsilon(1e-6));
        }
    }
    SUBCASE("clamp pins the score to [0, 72]") {
        auto set = make_set(pasi::RegionId::HeadNeck, 2, 32, rng);
        auto forced = params.regions[0];
        forced.head.weight.fill(0.0);
        forced.head.bias.data[0] = 100.0;
        CHECK(regional_forward(set, forced).score.value == 72.0);
        forced.head.bias.data[0] = -50.0;
        CHECK(regional_forward(set, forced).score.value == 0.0);
    }
}

TEST_CASE("permutation invariance of the regional score") {
    Rng rng(31);
    for (int trial = 0; trial < 10; ++trial) {
        auto params = init_params(tiny_config(8, 32), 100 + trial);
        const auto region = pasi::kAllRegions[trial % 4];
        const int n_valid = 2 + trial % 5;
        auto set = make_set(region, n_valid, 32, rng);
        auto base = regional_forward(set, params.regions[static_cast<size_t>(region)]);

        std::vector<size_t> perm(n_valid);
        std::iota(perm.begin(), perm.end(), 0);
        for (size_t i = perm.size(); i > 1; --i) {
            std::swap(perm[i - 1], perm[rng.uniform_int(0, static_cast<int64_t>(i) - 1)]);
        }
        auto shuffled = set;
        for (int i = 0; i < n_valid; ++i) shuffled.images[i] = set.images[perm[i]];
        auto out = regional_forward(shuffled, params.regions[static_cast<size_t>(region)]);

        CHECK(std::abs(out.score.value - base.score.value) < 1e-5);
        for (int i = 0; i < n_valid; ++i) {
            CHECK(out.attention.weights[i] ==
                  doctest::Approx(base.attention.weights[perm[i]]).epsilon(1e-9));
        }
    }
}

TEST_CASE("absolute forward combines regions through the fixed weights") {
    Rng rng(41);
    auto params = init_params(tiny_config(8, 32), 7);
    dataio::VisitSample sample;
    sample.patient_id = "p";
    sample.visit_id = "v";
    for (auto region : pasi::kAllRegions) {
        sample.region_sets[static_cast<size_t>(region)] = make_set(region, 2, 32, rng);
    }

    SUBCASE("all heads forced to 10 gives exactly 10") {
        for (auto& region_params : params.regions) {
            region_params.head.weight.fill(0.0);
            region_params.head.bias.data[0] = 10.0;
        }
        auto out = absolute_forward(sample, params);
        CHECK(out.total.value == doctest::Approx(10.0).epsilon(1e-12));
    }
    SUBCASE("regional outputs (10, 20, 5, 8) give 9.4") {
        const std::array<double, 4> forced = {10, 20, 5, 8};
        for (size_t r = 0; r < 4; ++r) {
            params.regions[r].head.weight.fill(0.0);
            params.regions[r].head.bias.data[0] = forced[r];
        }
        auto out = absolute_forward(sample, params);
        CHECK(out.total.value == doctest::Approx(9.4).epsilon(1e-12));
    }
    SUBCASE("zeroed heads clamp to zero") {
        for (auto& region_params : params.regions) {
            region_params.head.weight.fill(0.0);
            region_params.head.bias.fill(0.0);
        }
        auto out = absolute_forward(sample, params);
        CHECK(out.total.value == 0.0);
    }
}

TEST_CASE("shape audit across base widths") {
    Rng rng(51);
    for (int k : {16, 32, 96}) {
        auto params = init_params(tiny_config(k, 64), k);
        auto set = make_set(pasi::RegionId::Trunk, 2, 64, rng);
        auto out = regional_forward(set, params.regions[3]);
        CHECK(std::isfinite(out.score.value));
        CHECK(out.attention.pooled.size() == 768);
    }
}

TEST_CASE("forward is bitwise stable within a process") {
    Rng rng(61);
    auto params = init_params(tiny_config(8, 32), 3);
    auto set = make_set(pasi::RegionId::Trunk, 4, 32, rng);
    auto a = regional_forward(set, params.regions[3]);
    auto b = regional_forward(set, params.regions[3]);
    CHECK(a.score.value == b.score.value);
    CHECK(a.attention.weights == b.attention.weights);
}

TEST_CASE("checkpoints round-trip exactly") {
    testutil::TempDir tmp("ckpt");
    Rng rng(71);
    auto params = init_params(tiny_config(8, 32), 123);
    const auto path = tmp.path() / "model.ckpt";
    save_checkpoint(path, params);
    auto loaded = load_checkpoint(path);

    auto a = collect_named_tensors(params);
    auto b = collect_named_tensors(loaded);
    REQUIRE(a.size() == b.size());
    for (size_t i = 0; i < a.size(); ++i) CHECK(a[i].second->data == b[i].second->data);

    auto set = make_set(pasi::RegionId::UpperExtremities, 3, 32, rng);
    CHECK(regional_forward(set, params.regions[1]).score.value ==
          regional_forward(set, loaded.regions[1]).score.value);
}

TEST_CASE("pretrained encoder import checks shapes and names the tensor") {
    testutil::TempDir tmp("pretrained");
    auto params = init_params(tiny_config(8, 32), 5);

    // A valid shared-encoder archive built from region HN.
    TensorArchive archive;
    archive.header_json = "{}";
    for (const auto& [name, tensor] :
         collect_named_tensors(params.regions[0], "")) {
        if (name.rfind("encoder.", 0) == 0) archive.tensors.emplace_back(name, *tensor);
    }
    for (auto& [name, tensor] : archive.tensors) {
        for (auto& v : tensor.data) v += 1.0;
    }
    save_archive(tmp.path() / "enc.ckpt", archive);

    auto fresh = init_params(tiny_config(8, 32), 6);
    load_pretrained_encoder(fresh, tmp.path() / "enc.ckpt");
    for (size_t r = 0; r < 4; ++r) {
        CHECK(fresh.regions[r].encoder.convs[0].weight.data ==
              archive.tensors[0].second.data);
    }

    // Wrong shape must name the tensor.
    archive.tensors[0].second = Tensor::zeros({1, 2, 3});
    save_archive(tmp.path() / "bad.ckpt", archive);
    auto victim = init_params(tiny_config(8, 32), 7);
    CHECK_THROWS_WITH_AS(load_pretrained_encoder(victim, tmp.path() / "bad.ckpt"),
                         doctest::Contains("stage0.conv0.weight"), ValidationError);
}
