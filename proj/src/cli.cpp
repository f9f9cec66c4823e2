#include "mambatrans/cli.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "mambatrans/gradsuite.hpp"
#include "mambatrans/metrics.hpp"
#include "mambatrans/png_io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace mambatrans {

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;

void set_reduction(CharbonnierConfig& cfg, const std::string& name) {
    if (name == "sum")
        cfg.reduction = CharbonnierConfig::Reduction::Sum;
    else if (name == "mean")
        cfg.reduction = CharbonnierConfig::Reduction::Mean;
    else
        throw ConfigError("loss.reduction must be 'sum' or 'mean'");
}

std::string reduction_name(const CharbonnierConfig& cfg) {
    return cfg.reduction == CharbonnierConfig::Reduction::Sum ? "sum" : "mean";
}

Tensor<float> tensor_from_rgb(const ImageU8& img) {
    Tensor<float> t = Tensor<float>::zeros({img.height, img.width, 3});
    for (size_t i = 0; i < img.pixels.size(); ++i) t.data()[i] = static_cast<float>(img.pixels[i]) / 255.0f;
    return t;
}

ImageU8 rgb_from_tensor(const Tensor<float>& t) {
    ImageU8 img;
    img.height = t.dim(0);
    img.width = t.dim(1);
    img.channels = 3;
    img.pixels.resize(t.data().size());
    for (size_t i = 0; i < t.data().size(); ++i)
        img.pixels[i] = static_cast<uint8_t>(std::lround(std::clamp(t.data()[i], 0.0f, 1.0f) * 255.0f));
    return img;
}

Tensor<float> translate_sample(const TranslatorModel<float>& model, const Sample& s) {
    auto mask3 = reshape(s.voted_mask, {s.height, s.width, 1});
    return translate(model, s.fused, mask3, s.text_ids, /*training=*/false);
}

std::string data_root_or_env(std::string root) {
    if (!root.empty()) return root;
    if (const char* env = std::getenv("MTRANS_DATA_ROOT")) return env;
    throw ConfigError("no --data-root given and MTRANS_DATA_ROOT is unset");
}

TranslatorModel<float> load_model_checked(const std::string& ckpt, const RunConfig* cfg,
                                          bool config_given) {
    auto model = load_model<float>(ckpt);
    if (cfg && config_given && !(model.config == cfg->model))
        throw ConfigError("checkpoint " + ckpt + " carries a different model config than --config");
    return model;
}

// ---------------------------------------------------------------------- //

int cmd_gen_data(uint64_t seed, int count, int size, const std::string& out, bool force) {
    if (size < 32) throw ConfigError("--size must be >= 32 (generator minimum)");
    if (count < 1) throw ConfigError("--count must be >= 1");
    if (fs::exists(out) && !fs::is_empty(out)) {
        if (!force) throw DataError("output directory " + out + " is not empty (use --force)");
        fs::remove_all(out);
    }
    const int holdout = count >= 3 ? std::max(1, count / 6) : 0;
    const int train_count = count - 2 * holdout;
    std::vector<Sample> samples;
    std::vector<std::string> splits;
    for (int i = 0; i < count; ++i) {
        samples.push_back(generate_scene(seed + static_cast<uint64_t>(i), size, size, 2 + i % 3));
        splits.push_back(i < train_count ? "train" : (i < train_count + holdout ? "val" : "test"));
    }
    save_dataset(samples, splits, out, seed);
    std::cout << "wrote " << count << " samples (" << train_count << " train, " << holdout << " val, "
              << holdout << " test) under " << out << "\n";
    std::cout << "digest " << std::hex << digest_directory(out) << std::dec << "\n";
    return 0;
}

int cmd_pretrain_det(const RunConfig& cfg, const std::string& data_root, int steps, uint64_t seed,
                     const std::string& out) {
    auto manifest = load_dataset(data_root_or_env(data_root));
    auto det = make_detector<float>(cfg.det, seed);
    TrainConfig tc = cfg.train;
    tc.max_steps = steps;
    tc.seed = seed;
    tc.lr = cfg.det_lr;
    tc.milestones = default_milestones(steps);
    auto result = pretrain_detector(det, manifest, tc);
    save_detector(out, det);
    write_loss_curve_csv(out + ".curve.csv", result.curve);
    const double initial = result.curve.empty() ? 0.0 : result.curve.front().total;
    const double final_loss = result.curve.empty() ? 0.0 : result.curve.back().total;
    std::cout << "pretrained detector for " << steps << " steps: loss " << initial << " -> " << final_loss
              << "\nsaved " << out << "\n";
    return 0;
}

int cmd_train(const RunConfig& cfg, const std::string& data_root, const std::string& det_ckpt,
              const std::string& out_dir) {
    auto manifest = load_dataset(data_root_or_env(data_root));
    auto det = load_detector<float>(det_ckpt);
    auto model = make_model<float>(cfg.model, cfg.train.seed);
    fs::create_directories(out_dir);
    TrainConfig tc = cfg.train;
    tc.checkpoint_dir = out_dir;
    auto result = train(model, manifest, det, cfg.loss, tc);
    write_loss_curve_csv((fs::path(out_dir) / "loss_curve.csv").string(), result.curve);
    std::ofstream eff(fs::path(out_dir) / "effective_config.json");
    eff << cfg.to_json().dump(2) << "\n";
    const double initial = result.curve.empty() ? 0.0 : result.curve.front().total;
    const double final_loss = result.curve.empty() ? 0.0 : result.curve.back().total;
    std::cout << "trained " << tc.max_steps << " steps: loss " << initial << " -> " << final_loss
              << "\nsaved " << (fs::path(out_dir) / "model_final.ckpt").string() << "\n";
    return 0;
}

int cmd_translate_dataset(const std::string& ckpt, const std::string& data_root, const std::string& split,
                          const std::string& out_dir, const RunConfig* cfg, bool config_given) {
    auto model = load_model_checked(ckpt, cfg, config_given);
    auto manifest = load_dataset(data_root_or_env(data_root));
    fs::create_directories(out_dir);
    int n = 0;
    for (int i : manifest.split_indices(split)) {
        Sample s = load_sample(manifest, i);
        auto out = translate_sample(model, s);
        write_png((fs::path(out_dir) / (manifest.entries[static_cast<size_t>(i)].id + ".png")).string(),
                  rgb_from_tensor(out));
        ++n;
    }
    if (n == 0) throw DataError("no samples in split '" + split + "'");
    std::cout << "translated " << n << " images into " << out_dir << "\n";
    return 0;
}

std::vector<int> read_text_ids(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot open text file: " + path);
    std::vector<int> ids;
    int v;
    while (is >> v) ids.push_back(v);
    if (ids.empty()) throw DataError("text file " + path + " contains no token ids");
    return ids;
}

int cmd_translate_single(const std::string& ckpt, const std::string& image_path,
                         const std::string& mask_path, const std::string& text_path,
                         const std::string& out_path, const RunConfig* cfg, bool config_given) {
    auto model = load_model_checked(ckpt, cfg, config_given);
    auto img = read_png(image_path);
    if (img.channels != 3) throw DataError("input image must be RGB: " + image_path);
    auto mask_img = read_png(mask_path);
    if (mask_img.width != img.width || mask_img.height != img.height)
        throw DataError("mask size differs from image size");
    auto fused = tensor_from_rgb(img);
    Tensor<float> mask = Tensor<float>::zeros({img.height, img.width, 1});
    const int step = mask_img.channels;
    for (int p = 0; p < img.height * img.width; ++p)
        mask.data()[static_cast<size_t>(p)] = mask_img.pixels[static_cast<size_t>(p) * step] > 127 ? 1.0f : 0.0f;
    auto out = translate(model, fused, mask, read_text_ids(text_path), /*training=*/false);
    write_png(out_path, rgb_from_tensor(out));
    std::cout << "wrote " << out_path << "\n";
    return 0;
}

struct BoxFileImage {
    std::string id;
    DetectionTargets targets;
    std::vector<ScoredBox> scored;
};

std::vector<BoxFileImage> read_box_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot open box file: " + path);
    json j;
    try {
        is >> j;
    } catch (const json::exception& e) {
        throw DataError("corrupt box file " + path + ": " + e.what());
    }
    std::vector<BoxFileImage> out;
    for (const auto& img : j) {
        BoxFileImage b;
        b.id = img.value("id", std::to_string(out.size()));
        b.targets.width = img.at("width").get<int>();
        b.targets.height = img.at("height").get<int>();
        const auto& boxes = img.at("boxes");
        const auto& labels = img.at("labels");
        if (boxes.size() != labels.size()) throw DataError("box file " + path + ": boxes/labels mismatch");
        for (size_t i = 0; i < boxes.size(); ++i) {
            Box bx = {boxes[i].at(0).get<double>(), boxes[i].at(1).get<double>(),
                      boxes[i].at(2).get<double>(), boxes[i].at(3).get<double>()};
            b.targets.boxes.push_back(bx);
            b.targets.labels.push_back(labels[i].get<int>());
            double score = 1.0;
            if (img.contains("scores")) score = img.at("scores").at(i).get<double>();
            b.scored.push_back({bx, labels[i].get<int>(), score});
        }
        out.push_back(std::move(b));
    }
    return out;
}

void emit_report(const MetricReport& report, const std::string& format, const std::string& out_path) {
    std::string text = format == "table" ? report.to_table() : report.to_json().dump(2) + "\n";
    if (out_path.empty()) {
        std::cout << text;
    } else {
        std::ofstream os(out_path);
        if (!os) throw DataError("cannot write report: " + out_path);
        os << text;
        std::cout << "wrote " << out_path << "\n";
    }
}

int cmd_eval_boxes(const std::string& pred_path, const std::string& target_path,
                   const std::string& format, const std::string& out_path) {
    auto preds = read_box_file(pred_path);
    auto targets = read_box_file(target_path);
    if (preds.size() != targets.size())
        throw DataError("prediction and target files list different image counts");
    std::vector<std::vector<ScoredBox>> p;
    std::vector<DetectionTargets> t;
    for (size_t i = 0; i < preds.size(); ++i) {
        p.push_back(preds[i].scored);
        t.push_back(targets[i].targets);
    }
    MetricReport report;
    report.has_detection = true;
    report.detection = mean_average_precision(p, t, coco_iou_thresholds());
    emit_report(report, format, out_path);
    return 0;
}

int cmd_eval_dataset(const std::string& ckpt, const std::string& det_ckpt, const std::string& data_root,
                     const std::string& split, const std::string& format, const std::string& out_path,
                     const RunConfig* cfg, bool config_given) {
    auto model = load_model_checked(ckpt, cfg, config_given);
    auto det = load_detector<float>(det_ckpt);
    auto manifest = load_dataset(data_root_or_env(data_root));
    auto indices = manifest.split_indices(split);
    if (indices.empty()) throw DataError("no samples in split '" + split + "'");

    std::vector<std::string> ids;
    std::vector<ImageQuality> quality;
    std::vector<std::vector<ScoredBox>> preds;
    std::vector<DetectionTargets> targets;
    for (int i : indices) {
        Sample s = load_sample(manifest, i);
        auto out = translate_sample(model, s);
        auto luma = to_luma(out);
        ImageQuality q;
        q.en = entropy_en(luma);
        q.ag = avg_gradient(luma);
        q.sf = spatial_frequency(luma);
        q.psnr = psnr(out, s.visible);
        quality.push_back(q);
        ids.push_back(manifest.entries[static_cast<size_t>(i)].id);
        std::vector<ScoredBox> scored;
        for (const auto& d : detect(det, out)) scored.push_back({d.box, d.label, d.score});
        preds.push_back(std::move(scored));
        targets.push_back(s.det_targets);
    }
    auto report = make_report(ids, quality);
    report.has_detection = true;
    report.detection = mean_average_precision(preds, targets, coco_iou_thresholds());
    emit_report(report, format, out_path);
    return 0;
}

int cmd_grad_check(const std::string& module, int precision) {
    if (precision != 64 && precision != 32)
        throw ConfigError("--precision must be 64 or 32");
    auto cases = precision == 64 ? grad_suite<double>(module) : grad_suite<float>(module);
    bool all_passed = true;
    for (const auto& c : cases) {
        const bool gate = precision == 64;
        std::cout << (c.passed ? "[PASS] " : (gate ? "[FAIL] " : "[INFO] ")) << c.name
                  << "  max_rel_error=" << c.max_rel_error << "  tol=" << c.tolerance << "\n";
        if (!c.passed) all_passed = false;
    }
    if (precision == 32) {
        std::cout << "32-bit mode is informational only; finite differences need 64-bit.\n";
        return 0;
    }
    return all_passed ? 0 : 1;
}

}  // namespace

void RunConfig::apply_json(const json& j) {
    if (!j.is_object()) throw ConfigError("config must be a JSON object of dotted keys");
    for (const auto& [key, value] : j.items()) {
        try {
            if (key == "model.feature_channels") model.feature_channels = value.get<int>();
            else if (key == "model.num_groups") model.num_groups = value.get<int>();
            else if (key == "model.blocks_per_group") model.blocks_per_group = value.get<int>();
            else if (key == "model.state_dim") model.state_dim = value.get<int>();
            else if (key == "model.num_heads") model.num_heads = value.get<int>();
            else if (key == "model.text_vocab") model.text_vocab = value.get<int>();
            else if (key == "model.residual_output") model.residual_output = value.get<bool>();
            else if (key == "train.lr") train.lr = value.get<double>();
            else if (key == "train.batch_size") train.batch_size = value.get<int>();
            else if (key == "train.max_steps") train.max_steps = value.get<int>();
            else if (key == "train.seed") train.seed = value.get<uint64_t>();
            else if (key == "train.crop") train.crop = value.get<int>();
            else if (key == "train.checkpoint_every") train.checkpoint_every = value.get<int>();
            else if (key == "train.milestones") {
                train.milestones = value.get<std::vector<int>>();
                milestones_set = true;
            } else if (key == "loss.alpha") loss.charbonnier.alpha = value.get<double>();
            else if (key == "loss.beta") loss.charbonnier.beta = value.get<double>();
            else if (key == "loss.eps") loss.charbonnier.eps = value.get<double>();
            else if (key == "loss.reduction") set_reduction(loss.charbonnier, value.get<std::string>());
            else if (key == "loss.lambda") loss.lambda = value.get<double>();
            else if (key == "loss.theta") loss.theta = value.get<double>();
            else if (key == "det.num_classes") det.num_classes = value.get<int>();
            else if (key == "det.base_channels") det.base_channels = value.get<int>();
            else if (key == "det.mid_channels") det.mid_channels = value.get<int>();
            else if (key == "det.anchor_size") det.anchor_size = value.get<double>();
            else if (key == "det.iou_positive") det.iou_positive = value.get<double>();
            else if (key == "det.iou_negative") det.iou_negative = value.get<double>();
            else if (key == "det.lr") det_lr = value.get<double>();
            else throw ConfigError("unknown config key '" + key + "'");
        } catch (const json::exception& e) {
            throw ConfigError("bad value for config key '" + key + "': " + e.what());
        }
    }
}

json RunConfig::to_json() const {
    json j;
    j["model.feature_channels"] = model.feature_channels;
    j["model.num_groups"] = model.num_groups;
    j["model.blocks_per_group"] = model.blocks_per_group;
    j["model.state_dim"] = model.state_dim;
    j["model.num_heads"] = model.num_heads;
    j["model.text_vocab"] = model.text_vocab;
    j["model.residual_output"] = model.residual_output;
    j["train.lr"] = train.lr;
    j["train.batch_size"] = train.batch_size;
    j["train.max_steps"] = train.max_steps;
    j["train.milestones"] = train.milestones;
    j["train.seed"] = train.seed;
    j["train.crop"] = train.crop;
    j["train.checkpoint_every"] = train.checkpoint_every;
    j["loss.alpha"] = loss.charbonnier.alpha;
    j["loss.beta"] = loss.charbonnier.beta;
    j["loss.eps"] = loss.charbonnier.eps;
    j["loss.reduction"] = reduction_name(loss.charbonnier);
    j["loss.lambda"] = loss.lambda;
    j["loss.theta"] = loss.theta;
    j["det.num_classes"] = det.num_classes;
    j["det.base_channels"] = det.base_channels;
    j["det.mid_channels"] = det.mid_channels;
    j["det.anchor_size"] = det.anchor_size;
    j["det.iou_positive"] = det.iou_positive;
    j["det.iou_negative"] = det.iou_negative;
    j["det.lr"] = det_lr;
    return j;
}

void RunConfig::finalize() {
    model.text_embed_dim = model.feature_channels;
    if (!milestones_set) train.milestones = default_milestones(train.max_steps);
    model.validate();
    train.validate();
    loss.charbonnier.validate();
    det.validate();
}

RunConfig RunConfig::from_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot open config file: " + path);
    json j;
    try {
        is >> j;
    } catch (const json::exception& e) {
        throw DataError("corrupt config file " + path + ": " + e.what());
    }
    RunConfig cfg;
    cfg.apply_json(j);
    return cfg;
}

int run_cli(int argc, const char* const* argv) {
    CLI::App app{"MambaTrans multimodal image translator pipeline"};
    app.require_subcommand(1);

    std::string config_path;
    app.add_option("--config", config_path, "JSON config with flat dotted keys");

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
    uint64_t gen_seed = 0;
    int gen_count = 8, gen_size = 64;
    std::string gen_out;
    bool gen_force = false;
    gen->add_option("--seed", gen_seed, "generator seed");
    gen->add_option("--count", gen_count, "number of samples");
    gen->add_option("--size", gen_size, "square image size (>= 32)");
    gen->add_option("--out", gen_out, "output directory")->required();
    gen->add_flag("--force", gen_force, "overwrite a non-empty output directory");

    // pretrain-det
    auto* pre = app.add_subcommand("pretrain-det", "pre-train the surrogate detector");
    std::string pre_root, pre_out;
    int pre_steps = 1000;
    uint64_t pre_seed = 0;
    pre->add_option("--data-root", pre_root, "dataset root (or MTRANS_DATA_ROOT)");
    pre->add_option("--steps", pre_steps, "training steps");
    pre->add_option("--seed", pre_seed, "seed");
    pre->add_option("--out", pre_out, "output checkpoint path")->required();

    // train
    auto* tr = app.add_subcommand("train", "train the translator");
    std::string tr_root, tr_det, tr_out;
    tr->add_option("--data-root", tr_root, "dataset root (or MTRANS_DATA_ROOT)");
    tr->add_option("--det-ckpt", tr_det, "frozen detector checkpoint")->required();
    tr->add_option("--out-dir", tr_out, "output directory")->required();
    int tr_steps = -1;
    double tr_lr = -1;
    int64_t tr_seed = -1;
    int tr_batch = -1, tr_crop = -1;
    tr->add_option("--steps", tr_steps, "override train.max_steps");
    tr->add_option("--lr", tr_lr, "override train.lr");
    tr->add_option("--seed", tr_seed, "override train.seed");
    tr->add_option("--batch", tr_batch, "override train.batch_size");
    tr->add_option("--crop", tr_crop, "override train.crop");

    // translate
    auto* x = app.add_subcommand("translate", "translate fused images");
    std::string x_ckpt, x_root, x_split = "test", x_out_dir, x_image, x_mask, x_text, x_out;
    x->add_option("--ckpt", x_ckpt, "model checkpoint")->required();
    x->add_option("--data-root", x_root, "dataset root for batch mode");
    x->add_option("--split", x_split, "dataset split (batch mode)");
    x->add_option("--out-dir", x_out_dir, "output directory (batch mode)");
    x->add_option("--image", x_image, "input fused PNG (single mode)");
    x->add_option("--mask", x_mask, "voted-mask PNG (single mode)");
    x->add_option("--text", x_text, "text token id file (single mode)");
    x->add_option("--out", x_out, "output PNG (single mode)");

    // eval
    auto* ev = app.add_subcommand("eval", "evaluate translations or box files");
    std::string ev_ckpt, ev_det, ev_root, ev_split = "test", ev_format = "json", ev_out;
    std::string ev_pred, ev_target;
    ev->add_option("--ckpt", ev_ckpt, "model checkpoint (dataset mode)");
    ev->add_option("--det-ckpt", ev_det, "detector checkpoint (dataset mode)");
    ev->add_option("--data-root", ev_root, "dataset root (dataset mode)");
    ev->add_option("--split", ev_split, "dataset split");
    ev->add_option("--format", ev_format, "json or table");
    ev->add_option("--out", ev_out, "write the report here instead of stdout");
    ev->add_option("--pred-boxes", ev_pred, "scored predictions JSON (boxes-only mode)");
    ev->add_option("--target-boxes", ev_target, "targets JSON (boxes-only mode)");

    // grad-check
    auto* gc = app.add_subcommand("grad-check", "run finite-difference gradient suites");
    std::string gc_module = "all";
    int gc_precision = 64;
    gc->add_option("--module", gc_module, "substrate|ssm|attention|blocks|losses|all");
    gc->add_option("--precision", gc_precision, "64 (gate) or 32 (informational)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitUsage;
    }

    try {
        RunConfig cfg;
        const bool config_given = !config_path.empty();
        if (config_given) cfg = RunConfig::from_file(config_path);

        if (gen->parsed()) {
            cfg.finalize();
            return cmd_gen_data(gen_seed, gen_count, gen_size, gen_out, gen_force);
        }
        if (pre->parsed()) {
            cfg.finalize();
            return cmd_pretrain_det(cfg, pre_root, pre_steps, pre_seed, pre_out);
        }
        if (tr->parsed()) {
            if (tr_steps >= 0) {
                cfg.train.max_steps = tr_steps;
                if (!cfg.milestones_set) cfg.train.milestones.clear();
            }
            if (tr_lr > 0) cfg.train.lr = tr_lr;
            if (tr_seed >= 0) cfg.train.seed = static_cast<uint64_t>(tr_seed);
            if (tr_batch > 0) cfg.train.batch_size = tr_batch;
            if (tr_crop >= 0) cfg.train.crop = tr_crop;
            cfg.finalize();
            return cmd_train(cfg, tr_root, tr_det, tr_out);
        }
        if (x->parsed()) {
            cfg.finalize();
            const bool single = !x_image.empty();
            if (single) {
                if (x_mask.empty() || x_text.empty() || x_out.empty())
                    throw ConfigError("single mode needs --image --mask --text --out");
                return cmd_translate_single(x_ckpt, x_image, x_mask, x_text, x_out,
                                            config_given ? &cfg : nullptr, config_given);
            }
            if (x_out_dir.empty()) throw ConfigError("batch mode needs --out-dir (or use --image)");
            return cmd_translate_dataset(x_ckpt, x_root, x_split, x_out_dir,
                                         config_given ? &cfg : nullptr, config_given);
        }
        if (ev->parsed()) {
            if (ev_format != "json" && ev_format != "table")
                throw ConfigError("--format must be json or table");
            if (!ev_pred.empty() || !ev_target.empty()) {
                if (ev_pred.empty() || ev_target.empty())
                    throw ConfigError("boxes-only mode needs both --pred-boxes and --target-boxes");
                return cmd_eval_boxes(ev_pred, ev_target, ev_format, ev_out);
            }
            if (ev_ckpt.empty() || ev_det.empty())
                throw ConfigError("dataset mode needs --ckpt and --det-ckpt");
            cfg.finalize();
            return cmd_eval_dataset(ev_ckpt, ev_det, ev_root, ev_split, ev_format, ev_out,
                                    config_given ? &cfg : nullptr, config_given);
        }
        if (gc->parsed()) return cmd_grad_check(gc_module, gc_precision);
    } catch (const ConfigError& e) {
        std::cerr << e.what() << "\n";
        return kExitUsage;
    } catch (const DataError& e) {
        std::cerr << e.what() << "\n";
        return kExitData;
    } catch (const ContractError& e) {
        std::cerr << e.what() << "\n";
        return kExitData;
    } catch (const DimensionError& e) {
        std::cerr << e.what() << "\n";
        return kExitData;
    } catch (const NumericError& e) {
        std::cerr << e.what() << "\n";
        return kExitNumeric;
    }
    return 0;
}

}  // namespace mambatrans
