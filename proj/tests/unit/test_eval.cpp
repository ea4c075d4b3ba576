#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "ddt/errors.hpp"
#include "ddt/eval.hpp"
#include "support.hpp"

using namespace ddt;

namespace {

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

TokenSequence iota_seq(std::uint32_t n) {
    TokenSequence s(n);
    for (std::uint32_t i = 0; i < n; ++i) s[i] = i;
    return s;
}

LmConfig mini_lm() {
    LmConfig c;
    c.layers = 1;
    c.dim = 16;
    c.max_len = 16;
    c.text_vocab_size = 4;
    return c;
}

RunConfig mini_run() {
    RunConfig r = ExperimentConfig::default_lm_run();
    r.total_steps = 20;
    r.warmup_steps = 2;
    r.batch_size = 4;
    r.text_mixture_ratio = 0;
    return r;
}

}  // namespace

TEST(PerturbSpec, Parse) {
    EXPECT_EQ(PerturbationSpec::parse("none").name(), "none");
    EXPECT_EQ(PerturbationSpec::parse("global").name(), "global");
    EXPECT_EQ(PerturbationSpec::parse("local4").window, 4);
    EXPECT_EQ(PerturbationSpec::parse("local-16").name(), "local16");
    EXPECT_THROW(PerturbationSpec::parse("local1"), ConfigError);
    EXPECT_THROW(PerturbationSpec::parse("sideways"), ConfigError);
}

TEST(Perturb, NoneIsIdentity) {
    const auto s = TokenSequence{5, 1, 9, 9, 2};
    EXPECT_EQ(perturb(s, PerturbationSpec::parse("none", 3)), s);
}

TEST(Perturb, PreservesMultisetForEveryDegree) {
    std::mt19937_64 rng(0);
    for (const char* d : {"none", "local2", "local4", "local5", "global"})
        for (int trial = 0; trial < 50; ++trial) {
            TokenSequence s(1 + rng() % 40);
            for (auto& v : s) v = static_cast<std::uint32_t>(rng() % 7);
            auto out = perturb(s, PerturbationSpec::parse(d, rng()));
            std::sort(s.begin(), s.end());
            std::sort(out.begin(), out.end());
            ASSERT_EQ(out, s) << d;
        }
}

TEST(Perturb, GlobalIsSeedDeterministic) {
    const auto s = TokenSequence{0, 1, 2, 3};
    const auto a = perturb(s, PerturbationSpec::parse("global", 7));
    EXPECT_EQ(a, perturb(s, PerturbationSpec::parse("global", 7)));
}

TEST(Perturb, LocalStaysInsideWindows) {
    const auto s = iota_seq(16);
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const auto out = perturb(s, PerturbationSpec::parse("local4", seed));
        for (std::size_t i = 0; i < out.size(); ++i) ASSERT_EQ(out[i] / 4, i / 4);
    }
    // A trailing partial window is shuffled within itself.
    const auto odd = perturb(iota_seq(6), PerturbationSpec::parse("local4", 1));
    EXPECT_GE(odd[4], 4u);
    EXPECT_GE(odd[5], 4u);
}

TEST(Perturb, GlobalActuallyMoves) {
    const auto s = iota_seq(16);
    int moved = 0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) moved += perturb(s, PerturbationSpec::parse("global", seed)) != s;
    EXPECT_EQ(moved, 10);
}

TEST(PerturbationExperiment, Errors) {
    std::vector<TokenSequence> corpus(8, TokenSequence{0, 1, 2, 3});
    EXPECT_THROW(perturbation_experiment(corpus, 4, {}, mini_lm(), mini_run(), 0, 4), ConfigError);
    EXPECT_THROW(perturbation_experiment(corpus, 4, {"none"}, mini_lm(), mini_run(), 0, 9), ConfigError);
    EXPECT_THROW(perturbation_experiment(corpus, 4, {"bogus"}, mini_lm(), mini_run(), 0, 4), ConfigError);
}

TEST(PerturbationExperiment, NoneTwiceGivesIdenticalCurves) {
    std::vector<TokenSequence> corpus;
    for (std::uint32_t i = 0; i < 16; ++i) corpus.push_back({i % 4, (i + 1) % 4, (i * 3) % 4, 2});
    const auto r = perturbation_experiment(corpus, 4, {"none", "none", "global"}, mini_lm(), mini_run(), 1, 16);
    ASSERT_EQ(r.curves.size(), 3u);
    EXPECT_EQ(r.curves[0].losses, r.curves[1].losses);
    EXPECT_EQ(r.curves[0].settings_hash, r.curves[2].settings_hash);
    EXPECT_EQ(r.curves[0].losses.size(), 20u);
    EXPECT_DOUBLE_EQ(r.curves[0].final_loss, (r.curves[0].losses[18] + r.curves[0].losses[19]) / 2);
    EXPECT_DOUBLE_EQ(r.gap("none"), 0.0);
    EXPECT_DOUBLE_EQ(r.gap("global"), r.curve("global").final_loss - r.curve("none").final_loss);
}

TEST(PatchVq, ConstantImageSingleCentroid) {
    const auto img = torch::full({1, 3, 8, 8}, 0.25);
    const auto vq = patch_vq_baseline(img, 4, 1, 0);
    ASSERT_EQ(vq.tokens.size(), 1u);
    EXPECT_EQ(vq.tokens[0], (TokenSequence{0, 0, 0, 0}));
    EXPECT_EQ(vq.effective_k, 1);
}

TEST(PatchVq, DegenerateInputFallsBack) {
    const auto img = torch::full({2, 3, 8, 8}, -0.5);
    const auto vq = patch_vq_baseline(img, 4, 3, 0);
    EXPECT_EQ(vq.effective_k, 1);
    for (const auto& s : vq.tokens)
        for (auto id : s) EXPECT_LT(id, 3u);
}

TEST(PatchVq, SeedDeterminismAndSeparation) {
    // Two colours: each patch belongs to exactly one cluster.
    auto imgs = torch::full({4, 1, 8, 8}, -1.0);
    imgs.index_put_({torch::indexing::Slice(), 0, torch::indexing::Slice(0, 4), torch::indexing::Slice()}, 1.0);
    const auto a = patch_vq_baseline(imgs, 4, 2, 5), b = patch_vq_baseline(imgs, 4, 2, 5);
    EXPECT_TRUE(torch::equal(a.centroids, b.centroids));
    EXPECT_EQ(a.tokens, b.tokens);
    for (const auto& s : a.tokens) {
        EXPECT_EQ(s[0], s[1]);
        EXPECT_EQ(s[2], s[3]);
        EXPECT_NE(s[0], s[2]);
    }
    EXPECT_EQ(patch_vq_encode(a, imgs), a.tokens);
    EXPECT_THROW(patch_vq_baseline(imgs, 4, 100, 0), ConfigError);
}

TEST(PatchVq, NearestCentroidTieGoesLow) {
    const auto c = torch::tensor({0.0, 2.0}, torch::kFloat64).view({2, 1});
    const double x = 1.0;
    EXPECT_EQ(nearest_centroid(&x, c), 0);
}

TEST(Interpolate, Examples) {
    const TokenSequence a{1, 2, 3, 4}, b{9, 8, 7, 6};
    EXPECT_EQ(counterfactual_interpolate(a, b, std::vector<bool>(4, false)), a);
    EXPECT_EQ(counterfactual_interpolate(a, b, std::vector<bool>(4, true)), b);
    EXPECT_EQ(counterfactual_interpolate(a, b, {true, false, true, false}), (TokenSequence{9, 2, 7, 4}));
    EXPECT_THROW(counterfactual_interpolate(a, TokenSequence{1}, std::vector<bool>(4, true)), DomainError);
}

TEST(Interpolate, MaskParsing) {
    EXPECT_EQ(parse_interpolation_mask("0,2", 4), (std::vector<bool>{true, false, true, false}));
    EXPECT_EQ(parse_interpolation_mask("1-3", 5), (std::vector<bool>{false, true, true, true, false}));
    EXPECT_EQ(parse_interpolation_mask("", 2), (std::vector<bool>{false, false}));
    EXPECT_ANY_THROW(parse_interpolation_mask("4", 4));
    EXPECT_ANY_THROW(parse_interpolation_mask("x", 4));
}

TEST(PrefixSeries, FullPrefixEqualsFullDecode) {
    TokenizerConfig cfg;
    cfg.image_size = 8;
    cfg.patch_size = 4;
    cfg.T = 4;
    cfg.code_dim = 4;
    cfg.dec_layers = 1;
    cfg.dec_dim = 16;
    torch::manual_seed(0);
    Decoder d(cfg);
    {
        torch::NoGradGuard ng;
        for (auto& p : d->parameters()) p.normal_(0, 0.2);
    }
    const auto tokens = torch::randn({4, 4});
    const auto series = prefix_decode_series(d, tokens, {1, 2, 4}, 3, 9);
    ASSERT_EQ(series.size(), 3u);
    EXPECT_TRUE(torch::equal(series[2], sample_image(d, tokens, 9, {3})));
    EXPECT_THROW(prefix_decode_series(d, tokens, {2, 2}, 3, 9), DomainError);
    EXPECT_THROW(prefix_decode_series(d, tokens, {0, 1}, 3, 9), DomainError);
    EXPECT_THROW(prefix_decode_series(d, tokens, {5}, 3, 9), DomainError);
}

TEST(PrefixSeries, StatsCountMeanDecreases) {
    const auto s = prefix_series_stats({{10, 12, 11, 20}, {10, 14, 12, 20}});
    EXPECT_EQ(s.mean_psnr, (std::vector<double>{10, 13, 11.5, 20}));
    EXPECT_EQ(s.pairs, 3);
    EXPECT_EQ(s.violations, 1);
}

TEST(Lists, Parsing) {
    EXPECT_EQ(parse_int_list("1,2, 16", "t"), (std::vector<std::int64_t>{1, 2, 16}));
    EXPECT_THROW(parse_int_list("1,a", "t"), ConfigError);
    EXPECT_EQ(split_list("none, global,local4"), (std::vector<std::string>{"none", "global", "local4"}));
}

TEST(Report, EmptyIsConfigError) {
    test::TempDir dir;
    EXPECT_THROW(report_perturbation({}, dir.path().string(), {"abc", 0}), ConfigError);
}

TEST(Report, TablesAreByteIdenticalAcrossRuns) {
    PerturbationResult r;
    r.corpus_name = "ddt";
    r.curves.push_back({"none", {0, 1}, {2.0, 1.0}, 1.0, "h"});
    r.curves.push_back({"global", {0, 1}, {2.5, 1.8}, 1.8, "h"});
    test::TempDir a, b;
    report_perturbation({r}, a.path().string(), {"abc", 3});
    report_perturbation({r}, b.path().string(), {"abc", 3});
    for (const char* f : {"perturb_curves.jsonl", "perturb_final.jsonl", "perturb_curves.svg"}) {
        ASSERT_TRUE(std::filesystem::exists(a.path() / f)) << f;
        EXPECT_EQ(slurp((a.path() / f).string()), slurp((b.path() / f).string())) << f;
    }
    std::ifstream in(a.path() / "perturb_final.jsonl");
    std::string line;
    bool saw_global = false;
    while (std::getline(in, line)) {
        const auto j = json::parse(line);
        EXPECT_EQ(j.at("config_hash"), "abc");
        EXPECT_EQ(j.at("seed"), 3);
        if (j.at("degree") == "global") {
            saw_global = true;
            EXPECT_NEAR(j.at("gap_vs_none").get<double>(), 0.8, 1e-12);
        }
    }
    EXPECT_TRUE(saw_global);
}

TEST(Report, WriteTableRejectsMismatchedRows) {
    test::TempDir dir;
    nlohmann::ordered_json row;
    row["a"] = 1;
    EXPECT_THROW(write_table(dir.file("t.jsonl"), {"a", "b"}, {row}, {"h", 0}), DomainError);
    write_table(dir.file("ok.jsonl"), {"a"}, {row}, {"h", 0});
    EXPECT_EQ(slurp(dir.file("ok.jsonl")), "{\"a\":1,\"config_hash\":\"h\",\"seed\":0}\n");
}
