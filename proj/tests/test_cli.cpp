// Drives the segedit binary (path in SEGEDIT_CLI) through every subcommand.

#include "segedit/editnet.hpp"
#include "segedit/png_io.hpp"
#include "segedit/synth.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

using namespace segedit;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string cli() {
    char const* p = std::getenv("SEGEDIT_CLI");
    return p ? p : "";
}

struct Result {
    int code = -1;
    std::string err;
};

fs::path work_dir() {
    static fs::path dir = [] {
        auto d = fs::temp_directory_path() / ("segedit_cli_" + std::to_string(::getpid()));
        fs::remove_all(d);
        fs::create_directories(d);
        return d;
    }();
    return dir;
}

Result run(std::string const& args) {
    auto err = work_dir() / "stderr.txt";
    std::string cmd = "'" + cli() + "' " + args + " > /dev/null 2> '" + err.string() + "'";
    int status = std::system(cmd.c_str());
    Result r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    std::ifstream in(err);
    std::stringstream ss;
    ss << in.rdbuf();
    r.err = ss.str();
    return r;
}

std::string q(fs::path const& p) { return "'" + p.string() + "'"; }

json read_json(fs::path const& p) {
    std::ifstream in(p);
    return json::parse(in);
}

std::string read_text(fs::path const& p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

EditNetConfig tiny_net() {
    EditNetConfig c;
    c.working_size = 16;
    c.channels = 4;
    c.enc_channels = 3;
    c.disc_channels = 2;
    c.text_dim = 5;
    c.noise_dim = 3;
    c.residual_blocks = 1;
    return c;
}

fs::path tiny_weights() {
    auto p = work_dir() / "tiny.segw";
    if (!fs::exists(p)) save_weights(p, GeneratorWeights<float>::init(tiny_net(), 1));
    return p;
}

fs::path scene_png(synth::Shape shape) {
    auto p = work_dir() / ("scene_" + std::string(synth::shape_name(shape)) + ".png");
    if (!fs::exists(p))
        for (uint64_t seed = 1;; ++seed) {
            auto s = synth::make_synthetic_dataset(1, seed, 64).front();
            if (s.objects.front().shape == shape && s.objects.size() == 1) {
                write_png(p, s.image);
                break;
            }
        }
    return p;
}

json tiny_train_config(int main_epochs, int trdcm_epochs) {
    return {{"seed", 5},
            {"batch_size", 2},
            {"epochs_main", main_epochs},
            {"epochs_trdcm", trdcm_epochs},
            {"working_size", 16},
            {"dataset_size", 4},
            {"scene_size", 32},
            {"net", {{"channels", 4}, {"enc_channels", 3}, {"disc_channels", 2}, {"text_dim", 5}, {"noise_dim", 3}, {"residual_blocks", 1}}}};
}

} // namespace

class Cli : public ::testing::Test {
  protected:
    void SetUp() override {
        if (cli().empty()) GTEST_SKIP() << "SEGEDIT_CLI not set";
    }
};

TEST_F(Cli, RunWritesFourFiles) {
    auto out = work_dir() / "run_basic";
    auto r = run("run --image " + q(scene_png(synth::Shape::circle)) + " --text 'the circle is red' --weights " + q(tiny_weights()) +
                 " --out " + q(out));
    ASSERT_EQ(r.code, 0) << r.err;
    for (auto f : {"result.png", "seg_in.png", "seg_out.png", "report.json"}) EXPECT_TRUE(fs::exists(out / f)) << f;
    auto rep = read_json(out / "report.json");
    EXPECT_EQ(rep["action"], "attribute");
    EXPECT_EQ(rep["target"], "circle");
    EXPECT_EQ(rep["seg_source"], "backend");
}

TEST_F(Cli, RemoveLeavesNoTargetPixels) {
    auto out = work_dir() / "run_remove";
    auto r = run("run --image " + q(scene_png(synth::Shape::square)) + " --text 'remove' --weights " + q(tiny_weights()) + " --out " + q(out));
    ASSERT_EQ(r.code, 0) << r.err;
    auto rep = read_json(out / "report.json");
    EXPECT_EQ(rep["action"], "remove");
    EXPECT_EQ(rep["target_class_pixels_out"], 0);
    auto seg_out = read_segmap(out / "seg_out.png");
    EXPECT_EQ(seg_out.mask_of(rep["target_class"].get<int>()).area(), 0u);
}

TEST_F(Cli, UsageErrors) {
    EXPECT_EQ(run("run --image " + q(scene_png(synth::Shape::circle)) + " --text x --out " + q(work_dir() / "nope")).code, 2);
    EXPECT_EQ(run("run --bogus").code, 2);
    EXPECT_EQ(run("").code, 2);
    EXPECT_EQ(run("frobnicate").code, 2);
}

TEST_F(Cli, StageErrorsNameTheStage) {
    auto r = run("run --image " + q(scene_png(synth::Shape::circle)) + " --text 'remove the circle and make it 2x large' --weights " +
                 q(tiny_weights()) + " --out " + q(work_dir() / "amb"));
    EXPECT_NE(r.code, 0);
    EXPECT_NE(r.err.find("stage parse"), std::string::npos) << r.err;
    EXPECT_NE(r.err.find("ambiguity"), std::string::npos) << r.err;
}

TEST_F(Cli, SegOverrideEditsOnlyTheKeptInstance) {
    auto [img, seg] = test_support::two_circle_scene();
    auto user = test_support::erase_left(seg, 1, 32);
    auto dir = work_dir() / "seg_override";
    fs::create_directories(dir);
    write_png(dir / "in.png", img);
    write_segmap(dir / "mask.png", user);
    auto r = run("run --image " + q(dir / "in.png") + " --seg " + q(dir / "mask.png") + " --text 'the circle is red' --weights " +
                 q(tiny_weights()) + " --out " + q(dir / "out"));
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(read_json(dir / "out" / "report.json")["seg_source"], "user");
    EXPECT_EQ(read_segmap(dir / "out" / "seg_in.png"), user);
    auto out = read_png(dir / "out" / "result.png");
    auto band = extract_outline(user.mask_of(1), 2);
    int changed = 0;
    for (int y = 0; y < 64; ++y)
        for (int x = 0; x < 64; ++x)
            if (out.at(y, x, 0) != img.at(y, x, 0) || out.at(y, x, 1) != img.at(y, x, 1) || out.at(y, x, 2) != img.at(y, x, 2)) {
                ++changed;
                EXPECT_TRUE(user.get(y, x) == 1 || band.get(y, x)) << y << "," << x;
            }
    EXPECT_GT(changed, 0);
}

TEST_F(Cli, ExternalBackend) {
    char const* toy = std::getenv("SEGEDIT_TOY_BACKEND");
    if (!toy) GTEST_SKIP() << "SEGEDIT_TOY_BACKEND not set";
    auto out = work_dir() / "run_external";
    auto r = run("run --image " + q(scene_png(synth::Shape::triangle)) + " --text 'the triangle is blue' --weights " + q(tiny_weights()) +
                 " --backend 'external:" + std::string(toy) + "' --out " + q(out));
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(read_json(out / "report.json")["target"], "triangle");
    auto bad = run("run --image " + q(scene_png(synth::Shape::triangle)) + " --text 'the triangle is blue' --weights " + q(tiny_weights()) +
                   " --backend 'external:/bin/false' --out " + q(out));
    EXPECT_EQ(bad.code, 4) << bad.err;
}

TEST_F(Cli, SynthWritesScenes) {
    auto out = work_dir() / "synth";
    ASSERT_EQ(run("synth --n 3 --seed 2 --size 48 --out " + q(out)).code, 0);
    EXPECT_TRUE(fs::exists(out / "image_00002.png"));
    auto seg = read_segmap(out / "seg_00000.png");
    auto expect = synth::make_synthetic_dataset(3, 2, 48);
    EXPECT_EQ(seg, expect[0].seg);
    EXPECT_EQ(read_png(out / "image_00001.png"), quantize_8bit(expect[1].image));
    std::ifstream caps(out / "captions.jsonl");
    std::string line;
    int n = 0;
    while (std::getline(caps, line)) EXPECT_EQ(json::parse(line)["caption"], expect[n++].caption);
    EXPECT_EQ(n, 3);
}

TEST_F(Cli, TrainZeroEpochsAndDeterminism) {
    auto dir = work_dir() / "train";
    fs::create_directories(dir);
    std::ofstream(dir / "zero.json") << tiny_train_config(0, 0).dump();
    ASSERT_EQ(run("train --config " + q(dir / "zero.json") + " --out " + q(dir / "zero")).code, 0);
    EXPECT_EQ(read_text(dir / "zero" / "log.csv"), "epoch,l_adv,l_per,l_cor,l_damsm,l_reg,l_g,l_d\n");

    std::ofstream(dir / "two.json") << tiny_train_config(1, 1).dump();
    ASSERT_EQ(run("train --config " + q(dir / "two.json") + " --out " + q(dir / "a")).code, 0);
    ASSERT_EQ(run("train --config " + q(dir / "two.json") + " --out " + q(dir / "b")).code, 0);
    auto csv = read_text(dir / "a" / "log.csv");
    EXPECT_EQ(csv, read_text(dir / "b" / "log.csv"));
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);
    EXPECT_TRUE(fs::exists(dir / "a" / "weights.segw"));

    std::ofstream(dir / "bad.json") << R"({"epochs_main": 1, "learning_rat": 0.1})";
    EXPECT_EQ(run("train --config " + q(dir / "bad.json") + " --out " + q(dir / "bad")).code, 2);
    auto inf = tiny_train_config(1, 0);
    inf["learning_rate"] = 1e30;
    std::ofstream(dir / "inf.json") << inf.dump();
    auto r = run("train --config " + q(dir / "inf.json") + " --out " + q(dir / "inf"));
    EXPECT_EQ(r.code, 3) << r.err;
}

TEST_F(Cli, EvalReportIsDeterministic) {
    auto dir = work_dir() / "eval";
    ASSERT_EQ(run("eval --weights " + q(tiny_weights()) + " --n 10 --seed 4 --out " + q(dir / "a.json")).code, 0);
    ASSERT_EQ(run("eval --weights " + q(tiny_weights()) + " --n 10 --seed 4 --out " + q(dir / "b.json")).code, 0);
    auto a = read_json(dir / "a.json");
    EXPECT_EQ(a, read_json(dir / "b.json"));
    for (auto k : {"is", "fid", "n", "seed"}) EXPECT_TRUE(a.contains(k)) << k;
    EXPECT_EQ(a["n"], 10);
    EXPECT_LE(a["fid_real_real"].get<double>(), 1e-6);
    EXPECT_GE(a["is"].get<double>(), 1.0);
}
