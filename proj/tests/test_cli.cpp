#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "mambatrans/cli.hpp"
#include "mambatrans/data.hpp"
#include "mambatrans/png_io.hpp"

using namespace mambatrans;
namespace fs = std::filesystem;

namespace {

int cli(std::vector<std::string> args) {
    std::vector<const char*> argv = {"mambatrans"};
    for (const auto& a : args) argv.push_back(a.c_str());
    return run_cli(static_cast<int>(argv.size()), argv.data());
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
}

struct Workspace {
    fs::path root;
    explicit Workspace(const std::string& name) : root(fs::temp_directory_path() / name) {
        fs::remove_all(root);
        fs::create_directories(root);
    }
    ~Workspace() { fs::remove_all(root); }
    std::string path(const std::string& sub) const { return (root / sub).string(); }
};

void write_small_config(const std::string& path, int steps) {
    std::ofstream os(path);
    os << R"({
  "model.feature_channels": 8,
  "model.num_heads": 2,
  "model.num_groups": 1,
  "model.blocks_per_group": 1,
  "model.state_dim": 2,
  "train.max_steps": )" << steps << R"(,
  "train.batch_size": 1,
  "train.crop": 0,
  "train.seed": 3,
  "det.base_channels": 4,
  "det.mid_channels": 8
})";
}

}  // namespace

TEST_CASE("gen-data writes the manifest, honors --force, validates --size") {
    Workspace ws("mtrans_cli_gen");
    const auto out = ws.path("ds");
    CHECK(cli({"gen-data", "--seed", "5", "--count", "8", "--size", "32", "--out", out}) == 0);
    auto manifest = load_dataset(out);
    CHECK(manifest.entries.size() == 8);

    // refuse to overwrite without --force
    CHECK(cli({"gen-data", "--seed", "5", "--count", "8", "--size", "32", "--out", out}) == 3);
    // identical seed regenerates identical bytes
    const auto out2 = ws.path("ds2");
    CHECK(cli({"gen-data", "--seed", "5", "--count", "8", "--size", "32", "--out", out2}) == 0);
    CHECK(digest_directory(out) == digest_directory(out2));
    CHECK(cli({"gen-data", "--seed", "5", "--count", "8", "--size", "32", "--out", out, "--force"}) == 0);
    CHECK(digest_directory(out) == digest_directory(out2));

    // below the generator minimum
    CHECK(cli({"gen-data", "--seed", "1", "--count", "2", "--size", "16", "--out", ws.path("bad")}) == 2);
}

TEST_CASE("pipeline: pretrain, train, translate, eval run end to end") {
    Workspace ws("mtrans_cli_pipe");
    const auto data = ws.path("ds");
    REQUIRE(cli({"gen-data", "--seed", "9", "--count", "6", "--size", "32", "--out", data}) == 0);
    const auto config = ws.path("config.json");
    write_small_config(config, 2);
    const auto det = ws.path("det.ckpt");
    REQUIRE(cli({"--config", config, "pretrain-det", "--data-root", data, "--steps", "5", "--seed", "2",
                 "--out", det}) == 0);
    CHECK(fs::exists(det));
    CHECK(fs::exists(det + ".curve.csv"));

    const auto run_dir = ws.path("run");
    REQUIRE(cli({"--config", config, "train", "--data-root", data, "--det-ckpt", det, "--out-dir",
                 run_dir}) == 0);
    CHECK(fs::exists(fs::path(run_dir) / "model_final.ckpt"));
    CHECK(fs::exists(fs::path(run_dir) / "loss_curve.csv"));
    CHECK(fs::exists(fs::path(run_dir) / "effective_config.json"));

    const auto ckpt = (fs::path(run_dir) / "model_final.ckpt").string();
    const auto trans_dir = ws.path("translated");
    REQUIRE(cli({"translate", "--ckpt", ckpt, "--data-root", data, "--split", "test", "--out-dir",
                 trans_dir}) == 0);
    auto manifest = load_dataset(data);
    auto test_idx = manifest.split_indices("test");
    REQUIRE(!test_idx.empty());
    for (int i : test_idx) {
        const auto png = fs::path(trans_dir) / (manifest.entries[static_cast<size_t>(i)].id + ".png");
        REQUIRE(fs::exists(png));
        auto img = read_png(png.string());
        CHECK(img.width == manifest.entries[static_cast<size_t>(i)].width);
        CHECK(img.height == manifest.entries[static_cast<size_t>(i)].height);
        CHECK(img.channels == 3);
    }

    const auto report = ws.path("report.json");
    REQUIRE(cli({"eval", "--ckpt", ckpt, "--det-ckpt", det, "--data-root", data, "--split", "test",
                 "--format", "json", "--out", report}) == 0);
    auto j = nlohmann::json::parse(slurp(report));
    CHECK(j.contains("aggregate"));
    CHECK(j.contains("detection"));
    CHECK(j["per_image"].size() == test_idx.size());

    // table format also renders
    CHECK(cli({"eval", "--ckpt", ckpt, "--det-ckpt", det, "--data-root", data, "--split", "test",
               "--format", "table", "--out", ws.path("report.txt")}) == 0);
    CHECK(slurp(ws.path("report.txt")).find("PSNR") != std::string::npos);
}

TEST_CASE("train --steps 0 then translate equals translating the initial checkpoint") {
    Workspace ws("mtrans_cli_steps0");
    const auto data = ws.path("ds");
    REQUIRE(cli({"gen-data", "--seed", "4", "--count", "4", "--size", "32", "--out", data}) == 0);
    const auto config = ws.path("config.json");
    write_small_config(config, 0);
    const auto det = ws.path("det.ckpt");
    REQUIRE(cli({"--config", config, "pretrain-det", "--data-root", data, "--steps", "2", "--seed", "2",
                 "--out", det}) == 0);
    const auto run_dir = ws.path("run");
    REQUIRE(cli({"--config", config, "train", "--data-root", data, "--det-ckpt", det, "--out-dir",
                 run_dir}) == 0);

    // the initial model for the same config and seed, saved directly
    RunConfig cfg = RunConfig::from_file(config);
    cfg.finalize();
    auto fresh = make_model<float>(cfg.model, cfg.train.seed);
    const auto fresh_ckpt = ws.path("fresh.ckpt");
    save_model(fresh_ckpt, fresh);

    const auto out_a = ws.path("a");
    const auto out_b = ws.path("b");
    REQUIRE(cli({"translate", "--ckpt", (fs::path(run_dir) / "model_final.ckpt").string(), "--data-root",
                 data, "--split", "test", "--out-dir", out_a}) == 0);
    REQUIRE(cli({"translate", "--ckpt", fresh_ckpt, "--data-root", data, "--split", "test", "--out-dir",
                 out_b}) == 0);
    CHECK(digest_directory(out_a) == digest_directory(out_b));
}

TEST_CASE("translate single-image mode writes a matching-size PNG") {
    Workspace ws("mtrans_cli_single");
    const auto data = ws.path("ds");
    REQUIRE(cli({"gen-data", "--seed", "7", "--count", "3", "--size", "32", "--out", data}) == 0);
    const auto config = ws.path("config.json");
    write_small_config(config, 0);
    RunConfig cfg = RunConfig::from_file(config);
    cfg.finalize();
    auto model = make_model<float>(cfg.model, 1);
    const auto ckpt = ws.path("model.ckpt");
    save_model(ckpt, model);

    std::ofstream text(ws.path("text.txt"));
    text << "0 1\n";
    text.close();
    const auto out_png = ws.path("out.png");
    REQUIRE(cli({"translate", "--ckpt", ckpt, "--image", data + "/fused/0000.png", "--mask",
                 data + "/masks/0000.png", "--text", ws.path("text.txt"), "--out", out_png}) == 0);
    auto img = read_png(out_png);
    CHECK(img.width == 32);
    CHECK(img.height == 32);

    // zero-init head + residual output: the translation is the input itself
    CHECK(slurp(out_png) == slurp(data + "/fused/0000.png"));
}

TEST_CASE("eval on identical prediction and target box files gives mAP50 = 1") {
    Workspace ws("mtrans_cli_boxes");
    const char* boxes = R"([
      {"id": "0000", "width": 64, "height": 64,
       "boxes": [[4,4,20,20],[30,30,50,44]], "labels": [0,1], "scores": [0.9, 0.8]},
      {"id": "0001", "width": 64, "height": 64,
       "boxes": [[10,10,26,28]], "labels": [2], "scores": [0.7]}
    ])";
    std::ofstream(ws.path("pred.json")) << boxes;
    std::ofstream(ws.path("target.json")) << boxes;
    const auto report = ws.path("report.json");
    REQUIRE(cli({"eval", "--pred-boxes", ws.path("pred.json"), "--target-boxes", ws.path("target.json"),
                 "--out", report}) == 0);
    auto j = nlohmann::json::parse(slurp(report));
    CHECK(j["detection"]["mAP50"] == 1.0);
    CHECK(j["detection"]["mAP50_95"] == 1.0);
}

TEST_CASE("config round-trip: the dumped effective config reproduces identical outputs") {
    Workspace ws("mtrans_cli_roundtrip");
    const auto data = ws.path("ds");
    REQUIRE(cli({"gen-data", "--seed", "11", "--count", "4", "--size", "32", "--out", data}) == 0);
    const auto config = ws.path("config.json");
    write_small_config(config, 3);
    const auto det = ws.path("det.ckpt");
    REQUIRE(cli({"--config", config, "pretrain-det", "--data-root", data, "--steps", "3", "--seed", "1",
                 "--out", det}) == 0);

    const auto run_a = ws.path("runA");
    REQUIRE(cli({"--config", config, "train", "--data-root", data, "--det-ckpt", det, "--out-dir",
                 run_a}) == 0);
    const auto run_b = ws.path("runB");
    REQUIRE(cli({"--config", (fs::path(run_a) / "effective_config.json").string(), "train",
                 "--data-root", data, "--det-ckpt", det, "--out-dir", run_b}) == 0);
    CHECK(slurp(fs::path(run_a) / "model_final.ckpt") == slurp(fs::path(run_b) / "model_final.ckpt"));
    CHECK(slurp(fs::path(run_a) / "loss_curve.csv") == slurp(fs::path(run_b) / "loss_curve.csv"));
}

TEST_CASE("config files reject unknown keys; checkpoint/config mismatches are named") {
    Workspace ws("mtrans_cli_cfg");
    std::ofstream(ws.path("bad.json")) << R"({"model.feature_channel": 8})";  // typo'd key
    CHECK(cli({"--config", ws.path("bad.json"), "grad-check", "--module", "ssm"}) == 2);

    // mismatched --config vs checkpoint header
    const auto config = ws.path("config.json");
    write_small_config(config, 0);
    RunConfig cfg = RunConfig::from_file(config);
    cfg.finalize();
    auto model = make_model<float>(cfg.model, 1);
    const auto ckpt = ws.path("model.ckpt");
    save_model(ckpt, model);
    std::ofstream(ws.path("other.json")) << R"({"model.feature_channels": 12, "model.num_heads": 2})";
    CHECK(cli({"--config", ws.path("other.json"), "translate", "--ckpt", ckpt, "--data-root",
               ws.path("nonexistent"), "--split", "test", "--out-dir", ws.path("x")}) == 2);
}

TEST_CASE("grad-check rejects unknown modules and accepts 32-bit informational runs") {
    CHECK(cli({"grad-check", "--module", "nonsense"}) == 2);
    CHECK(cli({"grad-check", "--module", "ssm", "--precision", "16"}) == 2);
    CHECK(cli({"grad-check", "--module", "attention", "--precision", "32"}) == 0);
    CHECK(cli({"grad-check", "--module", "ssm", "--precision", "64"}) == 0);
}

TEST_CASE("missing data roots and checkpoints produce data errors") {
    Workspace ws("mtrans_cli_missing");
    CHECK(cli({"translate", "--ckpt", ws.path("no.ckpt"), "--data-root", ws.path("no_ds"), "--split",
               "test", "--out-dir", ws.path("out")}) == 3);
    const auto config = ws.path("config.json");
    write_small_config(config, 1);
    CHECK(cli({"--config", config, "train", "--data-root", ws.path("no_ds"), "--det-ckpt",
               ws.path("no.ckpt"), "--out-dir", ws.path("out")}) == 3);
}
