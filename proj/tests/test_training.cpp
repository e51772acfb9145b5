#include "segedit/pipeline.hpp"
#include "segedit/training.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <random>
#include <set>

using namespace segedit;
namespace fs = std::filesystem;

namespace {

ImageBuffer filled(int h, int w, float v) {
    ImageBuffer img(h, w, 3);
    for (size_t i = 0; i < img.size(); ++i) img.data()[i] = v;
    return img;
}

TrainConfig tiny_config() {
    TrainConfig c;
    c.seed = 3;
    c.batch_size = 2;
    c.epochs_main = 1;
    c.epochs_trdcm = 1;
    c.working_size = 16;
    c.dataset_size = 4;
    c.scene_size = 32;
    c.net.channels = 4;
    c.net.enc_channels = 3;
    c.net.disc_channels = 2;
    c.net.embed_dim = 64;
    c.net.text_dim = 5;
    c.net.noise_dim = 3;
    c.net.residual_blocks = 1;
    return c;
}

struct TempDir {
    fs::path path;
    TempDir() : path(fs::temp_directory_path() / ("segedit_train_" + std::to_string(::getpid()) + "_" + std::to_string(rand()))) {
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

} // namespace

TEST(LossReg, Examples) {
    EXPECT_EQ(loss_reg(filled(4, 5, 0.3f), filled(4, 5, 0.3f)), 1.0);
    EXPECT_EQ(loss_reg(filled(4, 5, 0.0f), filled(4, 5, 1.0f)), 0.0);
    auto a = filled(4, 4, 0.0f), b = filled(4, 4, 0.0f);
    for (int y = 0; y < 2; ++y)
        for (int x = 0; x < 4; ++x)
            for (int c = 0; c < 3; ++c) b.at(y, x, c) = 1.0f;
    EXPECT_DOUBLE_EQ(loss_reg(a, b), 0.5);
    EXPECT_THROW(loss_reg(filled(4, 4, 0), filled(4, 5, 0)), Error);
}

TEST(LossReg, SymmetricBoundedAndMatchesOracle) {
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<float> u(0, 1);
    for (int t = 0; t < 1000; ++t) {
        int h = 1 + t % 5, w = 1 + t % 7;
        ImageBuffer a(h, w, 3), b(h, w, 3);
        for (size_t i = 0; i < a.size(); ++i) a.data()[i] = u(rng), b.data()[i] = u(rng);
        double oracle = 0;
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                for (int c = 0; c < 3; ++c) oracle += std::fabs(static_cast<double>(a.at(y, x, c)) - b.at(y, x, c));
        oracle = 1.0 - oracle / (h * w * 3);
        double v = loss_reg(a, b);
        ASSERT_NEAR(v, oracle, 1e-9);
        ASSERT_EQ(v, loss_reg(b, a));
        ASSERT_GE(v, 0.0);
        ASSERT_LE(v, 1.0);
    }
}

TEST(LossGenerator, Examples) {
    TrainingLosses p;
    p.l_cor = 1;
    EXPECT_EQ(loss_generator(p), 0.0);
    p.l_cor = 0;
    EXPECT_EQ(loss_generator(p), 1.0);
    TrainingLosses q{0.5, 0.2, 0.8, 0.1, 0.9, 0, 0};
    EXPECT_NEAR(loss_generator(q), 1.9, 1e-12);
}

TEST(LossGenerator, MatchesOracleWithWeights) {
    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> u(0, 3), uw(0, 2);
    for (int t = 0; t < 1000; ++t) {
        TrainingLosses p{u(rng), u(rng), u(rng) / 3, u(rng), u(rng), 0, 0};
        LossWeights w{uw(rng), uw(rng), uw(rng), uw(rng), uw(rng)};
        double terms[5] = {w.adv * p.l_adv, w.per * p.l_per, w.cor - w.cor * p.l_cor, w.damsm * p.l_damsm, w.reg * p.l_reg};
        double oracle = 0;
        for (double x : terms) oracle += x;
        ASSERT_NEAR(loss_generator(p, w), oracle, 1e-9);
    }
}

TEST(LossGenerator, NonFiniteComponentIsNamed) {
    TrainingLosses p;
    p.l_damsm = std::nan("");
    try {
        loss_generator(p);
        FAIL();
    } catch (Error const& e) {
        EXPECT_EQ(e.kind(), ErrorKind::numeric);
        EXPECT_NE(std::string(e.what()).find("l_damsm"), std::string::npos);
    }
}

TEST(LossDiscriminator, ExamplesAndOracle) {
    EXPECT_EQ(loss_discriminator(0, 1, 0), 0.0);
    EXPECT_EQ(loss_discriminator(0, 0, 1), 2.0);
    EXPECT_NEAR(loss_discriminator(0.3, 0.6, 0.2), 0.9, 1e-12);
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(0, 1);
    for (int t = 0; t < 1000; ++t) {
        double a = 4 * u(rng), m = u(rng), mm = u(rng);
        double oracle = mm;
        oracle += 1;
        oracle -= m;
        oracle += a;
        ASSERT_NEAR(loss_discriminator(a, m, mm), oracle, 1e-9);
    }
    EXPECT_THROW(loss_discriminator(INFINITY, 0, 0), Error);
}

TEST(Mismatch, NeverKeepsOwnCaption) {
    std::mt19937_64 rng(4);
    auto data = synth::make_synthetic_dataset(64, 5, 32);
    for (size_t n : {1u, 2u, 3u, 16u}) {
        for (size_t start = 0; start + n <= data.size(); start += n) {
            std::vector<std::string> caps;
            for (size_t i = 0; i < n; ++i) caps.push_back(data[start + i].caption);
            auto wrong = sample_mismatched(caps, rng);
            ASSERT_EQ(wrong.size(), n);
            for (size_t i = 0; i < n; ++i) EXPECT_NE(wrong[i], caps[i]);
        }
    }
    // Whole batch sharing one caption falls back to a color swap.
    auto same = sample_mismatched({"the circle is red", "the circle is red"}, rng);
    for (auto const& s : same) {
        EXPECT_NE(s, "the circle is red");
        EXPECT_EQ(s.rfind("the circle is ", 0), 0u);
    }
}

TEST(TrainConfig, JsonRoundTripAndUnknownKeys) {
    auto c = tiny_config();
    auto back = train_config_from_json(to_json(c));
    EXPECT_EQ(to_json(back), to_json(c));
    EXPECT_THROW(train_config_from_json({{"learning_rat", 0.1}}), Error);
    EXPECT_THROW(train_config_from_json({{"loss_weights", {{"adversarial", 1}}}}), Error);
    EXPECT_THROW(train_config_from_json({{"batch_size", 0}}), Error);
    auto d = train_config_from_json(nlohmann::json::object());
    EXPECT_EQ(d.learning_rate, 2e-4);
    EXPECT_EQ(d.batch_size, 16);
    EXPECT_EQ(d.epochs_main, 30);
    EXPECT_EQ(d.epochs_trdcm, 10);
}

TEST(MakeExample, InputDiffersOnlyInsideTarget) {
    std::mt19937_64 rng(6);
    auto data = synth::make_synthetic_dataset(5, 7, 32);
    for (auto const& s : data) {
        auto ex = make_example(s, 16, rng);
        EXPECT_EQ(ex.input.height(), 16);
        EXPECT_EQ(ex.target_class, synth::class_id(s.objects[0].shape));
        EXPECT_NE(ex.input, ex.target);
        EXPECT_EQ(ex.caption, s.caption);
    }
}

TEST(Adam, FirstStepMovesByLearningRate) {
    auto p = ag::parameter<double>({3}, {1.0, -2.0, 0.5});
    p->grad = {4.0, -0.1, 0.0};
    Adam<double> opt(0.01);
    opt.step({p}, 1.0);
    EXPECT_NEAR(p->value[0], 1.0 - 0.01, 1e-7);
    EXPECT_NEAR(p->value[1], -2.0 + 0.01, 1e-6);
    EXPECT_EQ(p->value[2], 0.5);
    for (double g : p->grad) EXPECT_EQ(g, 0.0);
}

TEST(Train, ZeroEpochsLeavesWeightsUnchanged) {
    auto c = tiny_config();
    c.epochs_main = c.epochs_trdcm = 0;
    auto g = GeneratorWeights<float>::init(c.network(), 1);
    auto d = DiscriminatorWeights<float>::init(c.network(), 2);
    auto data = synth::make_synthetic_dataset(c.dataset_size, 1, c.scene_size);
    auto res = train(c, data, g, d);
    EXPECT_TRUE(res.history.empty());
    for (size_t i = 0; i < g.params.names().size(); ++i) EXPECT_EQ(res.gen.params.vars()[i]->value, g.params.vars()[i]->value);
}

TEST(Train, TwoEpochsAreDeterministicAndWriteCheckpoints) {
    auto c = tiny_config();
    auto data = synth::make_synthetic_dataset(c.dataset_size, 1, c.scene_size);
    TempDir dir;
    std::vector<TrainPhaseInfo> seen;
    TrainOptions opts{dir.path, [&](TrainPhaseInfo const& p, TrainingLosses const&) { seen.push_back(p); }};
    auto g0 = GeneratorWeights<float>::init(c.network(), 1);
    auto d0 = DiscriminatorWeights<float>::init(c.network(), 2);
    auto a = train(c, data, g0, d0, opts);
    auto b = train(c, data, GeneratorWeights<float>::init(c.network(), 1), DiscriminatorWeights<float>::init(c.network(), 2));
    ASSERT_EQ(a.history.size(), 2u);
    EXPECT_EQ(a.history, b.history);
    for (size_t i = 0; i < a.gen.params.names().size(); ++i) EXPECT_EQ(a.gen.params.vars()[i]->value, b.gen.params.vars()[i]->value);

    ASSERT_EQ(seen.size(), 2u);
    EXPECT_FALSE(seen[0].trdcm);
    EXPECT_TRUE(seen[1].trdcm);

    // Phase 1 leaves the detail module alone; phase 2 leaves the main module alone; the
    // frozen encoder never moves.
    auto changed = [&](std::string const& prefix) {
        for (size_t i = 0; i < g0.params.names().size(); ++i)
            if (g0.params.names()[i].rfind(prefix, 0) == 0 && a.gen.params.vars()[i]->value != g0.params.vars()[i]->value) return true;
        return false;
    };
    EXPECT_TRUE(changed("main."));
    EXPECT_TRUE(changed("trdcm."));
    EXPECT_FALSE(changed("enc."));
    EXPECT_FALSE(changed("damsm."));

    EXPECT_TRUE(fs::exists(dir.path / "epoch_001.segw"));
    EXPECT_TRUE(fs::exists(dir.path / "epoch_002.segw"));
    EXPECT_TRUE(fs::exists(dir.path / "weights.segw"));
    std::ifstream log(dir.path / "log.csv");
    std::string line;
    std::getline(log, line);
    EXPECT_EQ(line, csv_header());
    int rows = 0;
    while (std::getline(log, line)) ++rows;
    EXPECT_EQ(rows, 2);

    auto loaded = load_generator<float>(dir.path / "weights.segw");
    for (size_t i = 0; i < a.gen.params.names().size(); ++i) EXPECT_EQ(loaded.params.vars()[i]->value, a.gen.params.vars()[i]->value);
}

TEST(Train, MainPhaseOnlyDoesNotTouchDetailModule) {
    auto c = tiny_config();
    c.epochs_trdcm = 0;
    auto data = synth::make_synthetic_dataset(c.dataset_size, 1, c.scene_size);
    auto g0 = GeneratorWeights<float>::init(c.network(), 1);
    auto res = train(c, data, g0, DiscriminatorWeights<float>::init(c.network(), 2));
    for (size_t i = 0; i < g0.params.names().size(); ++i)
        if (g0.params.names()[i].rfind("trdcm.", 0) == 0) EXPECT_EQ(res.gen.params.vars()[i]->value, g0.params.vars()[i]->value);
}

TEST(Train, RejectsMismatchedWorkingSize) {
    auto c = tiny_config();
    auto other = c.network();
    other.working_size = 32;
    auto data = synth::make_synthetic_dataset(2, 1, c.scene_size);
    EXPECT_THROW(train(c, data, GeneratorWeights<float>::init(other, 1), DiscriminatorWeights<float>::init(other, 2)), Error);
}

TEST(Config, ShippedFilesParse) {
    auto desk = load_train_config(fs::path(SEGEDIT_CONFIG_DIR) / "desk.json");
    EXPECT_EQ(desk.working_size, 64);
    EXPECT_EQ(desk.network().channels, 16);
    EXPECT_EQ(desk.epochs_main + desk.epochs_trdcm, 40);
    EXPECT_EQ(desk.loss_weights.per, 5.0);
    EXPECT_EQ(desk.loss_weights.reg, 0.1);
    auto serve = load_engine_config(fs::path(SEGEDIT_CONFIG_DIR) / "serve.json");
    EXPECT_EQ(serve.backend, "toy");
    EXPECT_EQ(serve.seam_band, 2);
}
