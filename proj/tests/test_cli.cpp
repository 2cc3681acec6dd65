#include <filesystem>
#include <sstream>

#include <gtest/gtest.h>

#include "pmsm/cli.hpp"
#include "test_util.hpp"

using namespace pmsm;
namespace fs = std::filesystem;

namespace {

struct Result {
    int code;
    std::string log;
};

Result run_cli(std::vector<std::string> args) {
    args.insert(args.begin(), "pmsm");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream log;
    const int code = cli::run(static_cast<int>(argv.size()), argv.data(), log);
    return {code, log.str()};
}

// 3 models x 3 identities x 3 images at 64 px, 3 held-out identities,
// a 32 px network and three iterations.
nlohmann::json small_config(int models = 3) {
    nlohmann::json j;
    j["dataset"]["synthetic"] = {{"num_models", models},
                                 {"identities_per_model", 3},
                                 {"images_per_identity", 3},
                                 {"image_size", 64},
                                 {"jitter_px", 0},
                                 {"illumination", 0.0}};
    j["dataset"]["num_test_identities"] = 3;
    j["mining"]["parts"]["seeds_per_class"] = 3;
    j["train"]["max_iter"] = 3;
    j["train"]["batch_triplets"] = 2;
    j["train"]["architecture"]["stream"] = {{"input_px", 32}, {"conv_channels", {4, 8}}, {"out_dim", 8}};
    j["train"]["architecture"]["embed_dim"] = 8;
    j["eval"]["split_sizes"] = {2, 3};
    return j;
}

fs::path write_config(const TempDir& dir, const nlohmann::json& j, const std::string& name = "config.json") {
    const auto p = dir / name;
    spit(p, j.dump());
    return p;
}

std::size_t count_lines(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

}  // namespace

TEST(Cli, HelpAndUsageErrors) {
    EXPECT_EQ(run_cli({"--help"}).code, 0);
    EXPECT_EQ(run_cli({}).code, 1);
    EXPECT_EQ(run_cli({"bogus"}).code, 1);
    EXPECT_EQ(run_cli({"synth", "--profile", "huge"}).code, 1);
}

TEST(Cli, SynthWritesManifestAndIsDeterministic) {
    TempDir dir;
    const auto cfg = write_config(dir, small_config());
    const auto a = run_cli({"synth", "--config", cfg.string(), "--out", (dir / "a").string(), "--seed", "4"});
    ASSERT_EQ(a.code, 0) << a.log;
    const auto b = run_cli({"synth", "--config", cfg.string(), "--out", (dir / "b").string(), "--seed", "4"});
    ASSERT_EQ(b.code, 0) << b.log;
    EXPECT_EQ(read_manifest_rows(dir / "a" / "dataset" / "manifest.csv").size(), 27u);
    EXPECT_EQ(slurp(dir / "a" / "dataset" / "manifest.csv"), slurp(dir / "b" / "dataset" / "manifest.csv"));
    EXPECT_EQ(slurp(dir / "a" / "dataset" / "images" / "img_000005.png"),
              slurp(dir / "b" / "dataset" / "images" / "img_000005.png"));
    EXPECT_TRUE(fs::exists(dir / "a" / "dataset" / "ground_truth.json"));
    const auto eff = nlohmann::json::parse(slurp(dir / "a" / "config.json"));
    EXPECT_EQ(eff.at("dataset").at("synthetic").at("rng_seed"), 4);
    EXPECT_EQ(eff.at("train").at("rng_seed"), 4);
    EXPECT_TRUE(eff.contains("config_hash"));
}

TEST(Cli, OverlappingCueRegionsExitNonzeroNamingTheConstraint) {
    TempDir dir;
    auto j = small_config();
    j["dataset"]["synthetic"]["identity_cue_region"] = {0.1, 0.5, 0.9, 0.8};
    const auto r = run_cli({"synth", "--config", write_config(dir, j).string(), "--out", (dir / "o").string()});
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.log.find("must not overlap"), std::string::npos) << r.log;
}

TEST(Cli, MineWritesParsablePartsAndVisuals) {
    TempDir dir;
    const auto cfg = write_config(dir, small_config());
    const auto r = run_cli({"mine", "--config", cfg.string(), "--out", dir.path.string()});
    ASSERT_EQ(r.code, 0) << r.log;
    const auto parts = read_parts_file(dir / "parts.json");
    EXPECT_TRUE(parts.part_m.rect.valid());
    EXPECT_TRUE(parts.part_i.rect.valid());
    EXPECT_TRUE(parts.provenance.contains("config_hash"));
    bool heat = false, overlay = false;
    for (const auto& e : fs::directory_iterator(dir / "mining")) {
        heat = heat || e.path().string().ends_with("_heatmap.png");
        overlay = overlay || e.path().string().ends_with("_overlay.png");
    }
    EXPECT_TRUE(heat);
    EXPECT_TRUE(overlay);
}

TEST(Cli, MineOnOneModelClassReportsNoContrast) {
    TempDir dir;
    auto j = small_config(1);
    j["dataset"]["num_test_identities"] = 1;
    const auto r = run_cli({"mine", "--config", write_config(dir, j).string(), "--out", dir.path.string()});
    EXPECT_NE(r.code, 0);
    EXPECT_NE(r.log.find("no inter-class contrast"), std::string::npos) << r.log;
}

TEST(Cli, TrainWithoutPartsFails) {
    TempDir dir;
    const auto r = run_cli({"train", "--config", write_config(dir, small_config()).string(), "--out",
                            dir.path.string(), "--parts", (dir / "absent.json").string()});
    EXPECT_NE(r.code, 0);
    EXPECT_NE(r.log.find("parts file not found"), std::string::npos);
}

TEST(Cli, TrainThenEvalEmitsReportsPerSplitTaskRepeat) {
    TempDir dir;
    const auto cfg = write_config(dir, small_config()).string();
    const auto out = dir.path.string();
    ASSERT_EQ(run_cli({"mine", "--config", cfg, "--out", out}).code, 0);
    const auto t = run_cli({"train", "--config", cfg, "--out", out});
    ASSERT_EQ(t.code, 0) << t.log;
    EXPECT_TRUE(fs::exists(dir / "train" / "model.ckpt"));
    EXPECT_TRUE(fs::exists(dir / "train" / "loss_trace.csv"));
    const auto e = run_cli({"eval", "--config", cfg, "--out", out, "--repeats", "2"});
    ASSERT_EQ(e.code, 0) << e.log;
    const auto csv = slurp(dir / "eval" / "summary.csv");
    EXPECT_EQ(count_lines(csv), 1u + 2 * 2 * 2);  // header + sizes x tasks x repeats
    EXPECT_NE(csv.find("test2,retrieval,0,"), std::string::npos);
    EXPECT_NE(csv.find("test3,reid,1,"), std::string::npos);
    const auto rep = nlohmann::json::parse(slurp(dir / "eval" / "reports.json"));
    EXPECT_EQ(rep.at("reports").size(), 8u);
    for (const auto& r : rep.at("reports")) {
        EXPECT_GE(r.at("mAP").get<double>(), 0.0);
        EXPECT_LE(r.at("mAP").get<double>(), 1.0);
    }

    // a checkpoint of another architecture is refused unless forced
    auto other = small_config();
    other["train"]["architecture"]["embed_dim"] = 6;
    const auto ocfg = write_config(dir, other, "other.json").string();
    const auto refused = run_cli({"eval", "--config", ocfg, "--out", out});
    EXPECT_EQ(refused.code, 1);
    EXPECT_NE(refused.log.find("--force"), std::string::npos);
    EXPECT_EQ(run_cli({"eval", "--config", ocfg, "--out", out, "--force"}).code, 0);
}

TEST(Cli, PipelineChainsStagesAndSkipTrainReusesCheckpoint) {
    TempDir dir;
    const auto cfg = write_config(dir, small_config()).string();
    const auto out = dir.path.string();
    EXPECT_EQ(run_cli({"pipeline", "--config", cfg, "--out", out, "--skip-train"}).code, 1);

    const auto first = run_cli({"pipeline", "--config", cfg, "--out", out, "--baseline"});
    ASSERT_EQ(first.code, 0) << first.log;
    for (const char* f : {"dataset/manifest.csv", "parts.json", "train/model.ckpt", "train/run_meta.json",
                          "eval/summary.csv", "train_whole/model.ckpt", "eval_train_whole/summary.csv"})
        EXPECT_TRUE(fs::exists(dir / f)) << f;
    const auto ckpt = slurp(dir / "train" / "model.ckpt");
    const auto mtime = fs::last_write_time(dir / "train" / "model.ckpt");
    fs::remove(dir / "eval" / "summary.csv");

    const auto again = run_cli({"pipeline", "--config", cfg, "--out", out, "--skip-train"});
    ASSERT_EQ(again.code, 0) << again.log;
    EXPECT_NE(again.log.find("reusing"), std::string::npos);
    EXPECT_EQ(fs::last_write_time(dir / "train" / "model.ckpt"), mtime);
    EXPECT_EQ(slurp(dir / "train" / "model.ckpt"), ckpt);
    EXPECT_TRUE(fs::exists(dir / "eval" / "summary.csv"));
}

TEST(Cli, PaperProfileEchoesConstants) {
    TempDir dir;
    // keep the dataset small; everything else comes from the paper profile
    nlohmann::json j{{"dataset", small_config()["dataset"]}};
    const auto r = run_cli({"synth", "--profile", "paper", "--config", write_config(dir, j).string(), "--out",
                            dir.path.string()});
    ASSERT_EQ(r.code, 0) << r.log;
    const auto eff = nlohmann::json::parse(slurp(dir / "config.json"));
    const auto& t = eff.at("train");
    EXPECT_EQ(t.at("momentum"), 0.9);
    EXPECT_EQ(t.at("weight_decay"), 2e-4);
    EXPECT_EQ(t.at("schedules").at("base_lr"), 0.05);
    EXPECT_EQ(t.at("batch_images"), 180);
    EXPECT_EQ(t.at("max_iter"), 100000);
    EXPECT_EQ(eff.at("eval").at("split_sizes"), nlohmann::json({800, 1600, 2400}));
}

TEST(Cli, InvalidConfigValuesAreConfigErrors) {
    TempDir dir;
    auto j = small_config();
    j["train"]["momentum"] = 1.5;
    EXPECT_EQ(run_cli({"synth", "--config", write_config(dir, j).string(), "--out", dir.path.string()}).code, 1);
    spit(dir / "broken.json", "{ not json");
    EXPECT_EQ(run_cli({"synth", "--config", (dir / "broken.json").string(), "--out", dir.path.string()}).code, 1);
}
