// Command-line front end: synthetic data generation, training, evaluation,
// prediction and the gradient self-check, driven by a JSON config plus
// `--set key=value` overrides. Every run writes the fully resolved config
// and its metric outputs to <out_dir>/run.json.
//
// Exit codes: 0 success, 1 config/validation error, 2 runtime error.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "arcp/attenet.hpp"
#include "arcp/checkpoint.hpp"
#include "arcp/fusion.hpp"
#include "arcp/gradsuite.hpp"
#include "arcp/iatcnn.hpp"
#include "arcp/io_util.hpp"
#include "arcp/metrics.hpp"
#include "arcp/netpbm.hpp"
#include "arcp/optim.hpp"
#include "arcp/synth.hpp"
#include "arcp/trajectory.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace arcp;

namespace {

// thrown for anything the user can fix in the config; exits with code 1
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// ----- config plumbing -------------------------------------------------------

void merge_into(json& base, const json& overlay) {
    if (!overlay.is_object() || !base.is_object()) {
        base = overlay;
        return;
    }
    for (auto it = overlay.begin(); it != overlay.end(); ++it) {
        if (base.contains(it.key()) && base[it.key()].is_object() && it.value().is_object())
            merge_into(base[it.key()], it.value());
        else
            base[it.key()] = it.value();
    }
}

void apply_set(json& config, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos)
        throw ConfigError("--set expects key=value, got '" + assignment + "'");
    const std::string key = assignment.substr(0, eq);
    const std::string raw = assignment.substr(eq + 1);
    json value;
    try {
        value = json::parse(raw);
    } catch (const json::exception&) {
        value = raw;  // unquoted strings pass through
    }
    json* node = &config;
    std::size_t at = 0;
    while (true) {
        const auto dot = key.find('.', at);
        const std::string part = key.substr(at, dot == std::string::npos ? std::string::npos : dot - at);
        if (part.empty()) throw ConfigError("--set: empty key segment in '" + key + "'");
        if (dot == std::string::npos) {
            (*node)[part] = value;
            break;
        }
        node = &(*node)[part];
        at = dot + 1;
    }
}

// typed getters that name the offending field path
class Cfg {
public:
    Cfg(const json& j, std::string path) : j_(&j), path_(std::move(path)) {}

    Cfg at(const std::string& key) const {
        if (!j_->is_object() || !j_->contains(key))
            throw ConfigError("config." + join(key) + ": missing required field");
        return Cfg((*j_)[key], join(key));
    }
    bool has(const std::string& key) const { return j_->is_object() && j_->contains(key); }

    template <typename T>
    T get(const std::string& key) const {
        return at(key).as<T>();
    }
    template <typename T>
    T get_or(const std::string& key, T fallback) const {
        if (!has(key)) return fallback;
        return at(key).as<T>();
    }
    template <typename T>
    T as() const {
        try {
            return j_->get<T>();
        } catch (const json::exception&) {
            throw ConfigError("config." + path_ + ": wrong type, got " + j_->dump());
        }
    }
    const json& raw() const { return *j_; }

private:
    std::string join(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
    const json* j_;
    std::string path_;
};

// ----- presets ------------------------------------------------------------------

json default_config(const std::string& task, const std::string& preset) {
    const bool paper = preset == "paper";
    if (!paper && preset != "desk") throw ConfigError("config.preset: expected 'desk' or 'paper'");

    json c;
    c["preset"] = preset;
    c["seed"] = 1;
    c["window"] = {{"t_obs", 8}, {"t_pred", 12}, {"stride", 20}, {"n_max", paper ? 32 : 8}};

    json model;
    model["variant"] = "ia-tcnn";
    model["kernel_size"] = paper ? 30 : 8;
    model["filters"] = paper ? std::vector<int>{128, 128, 128} : std::vector<int>{32, 32, 32};
    model["convs_per_block"] = 1;
    model["context_channels"] = true;
    model["input_scale"] = paper ? 1.0 : 0.25;
    c["model"] = model;

    json classifier;
    classifier["stage_widths"] = paper ? std::vector<int>{16, 32, 64, 128, 256}
                                       : std::vector<int>{8, 8, 16, 16, 32};
    classifier["units_per_stage"] = std::vector<int>{1, 1, 1, 1, 1};
    classifier["stage_strides"] = std::vector<int>{1, 2, 2, 2, 2};
    classifier["se_reduction"] = 4;
    classifier["input_size"] = 32;
    classifier["dropout_p"] = 0.2;
    c["classifier"] = classifier;

    if (task == "train-mp")
        c["train"] = {{"lr", paper ? 5e-4 : 5e-3}, {"epochs", paper ? 100 : 20},
                      {"batch", 12},               {"clip_norm", 10.0}};
    if (task == "train-tl")
        c["train"] = {{"lr", paper ? 4e-3 : 1e-2},
                      {"momentum", 0.9},
                      {"poly_end_lr", 2e-4},
                      {"epochs", paper ? 100 : 10},
                      {"batch", 32},
                      {"clip_norm", 10.0}};
    if (task == "train-arcp")
        c["train"] = {{"lr", paper ? 5e-5 : 1e-3}, {"epochs", paper ? 100 : 15},
                      {"batch", 10},               {"clip_norm", 10.0}};
    if (task == "gradcheck") {
        c["cases_per_op"] = 100;
        c["model_instances"] = 3;
    }
    return c;
}

IatcnnConfig model_config_from(const Cfg& cfg) {
    Cfg m = cfg.at("model");
    Cfg w = cfg.at("window");
    IatcnnConfig out;
    out.variant = iatcnn_variant_from_name(m.get<std::string>("variant"));
    out.kernel_size = m.get<int>("kernel_size");
    out.filters = m.get<std::vector<int>>("filters");
    out.convs_per_block = m.get<int>("convs_per_block");
    out.context_channels = m.get<bool>("context_channels");
    out.input_scale = m.get<double>("input_scale");
    out.t_obs = w.get<int>("t_obs");
    out.t_pred = w.get<int>("t_pred");
    out.n_max = w.get<int>("n_max");
    try {
        out.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("config.model: ") + e.what());
    }
    return out;
}

AtteNetConfig classifier_config_from(const Cfg& cfg, int num_classes) {
    Cfg m = cfg.at("classifier");
    AtteNetConfig out;
    out.stage_widths = m.get<std::vector<int>>("stage_widths");
    out.units_per_stage = m.get<std::vector<int>>("units_per_stage");
    out.stage_strides = m.get<std::vector<int>>("stage_strides");
    out.se_reduction = m.get<int>("se_reduction");
    out.input_size = m.get<int>("input_size");
    out.dropout_p = m.get<double>("dropout_p");
    out.num_classes = num_classes;
    try {
        out.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("config.classifier: ") + e.what());
    }
    return out;
}

WindowSpec window_from(const Cfg& cfg) {
    Cfg w = cfg.at("window");
    WindowSpec spec;
    spec.t_obs = w.get<int>("t_obs");
    spec.t_pred = w.get<int>("t_pred");
    spec.stride = w.get<int>("stride");
    spec.n_max = w.get<int>("n_max");
    try {
        spec.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("config.window: ") + e.what());
    }
    return spec;
}

CrossingRule rule_from(const Cfg& cfg) {
    CrossingRule rule;
    if (cfg.has("rule")) {
        Cfg r = cfg.at("rule");
        rule.corridor_x0 = r.get_or<double>("x0", -1.0);
        rule.corridor_x1 = r.get_or<double>("x1", 1.0);
        rule.corridor_y0 = r.get_or<double>("y0", -1.0);
        rule.corridor_y1 = r.get_or<double>("y1", 1.0);
        rule.horizon = r.get_or<double>("horizon", 4.8);
    }
    try {
        rule.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("config.rule: ") + e.what());
    }
    return rule;
}

// ----- shared helpers ---------------------------------------------------------------

std::string out_dir_of(const Cfg& cfg) {
    const std::string dir = cfg.get<std::string>("out_dir");
    fs::create_directories(dir);
    return dir;
}

void write_run_json(const std::string& out_dir, const std::string& task, const json& config,
                    const json& results) {
    json run;
    run["task"] = task;
    run["config"] = config;
    run["results"] = results;
    write_text_file(out_dir + "/run.json", run.dump(2) + "\n");
}

std::vector<std::string> list_scene_files(const std::string& data) {
    std::vector<std::string> files;
    if (fs::is_directory(data)) {
        for (const auto& entry : fs::directory_iterator(data))
            if (entry.path().extension() == ".csv") files.push_back(entry.path().string());
        std::sort(files.begin(), files.end());
    } else if (fs::exists(data)) {
        files.push_back(data);
    }
    if (files.empty()) throw ConfigError("config.data: no trajectory CSV found at '" + data + "'");
    return files;
}

struct LoadedWindows {
    std::vector<SceneWindow> windows;
    std::vector<std::string> scene_of;  // parallel: source file per window
    int normalized_quaternions = 0;
};

LoadedWindows load_windows(const Cfg& cfg, const WindowSpec& spec) {
    LoadedWindows out;
    for (const auto& file : list_scene_files(cfg.get<std::string>("data"))) {
        LoadReport report = load_canonical(file);
        out.normalized_quaternions += report.normalized_quaternions;
        Scene scene = report.scene;
        if (cfg.has("encode_relative")) {
            Cfg enc = cfg.at("encode_relative");
            scene = encode_relative(scene, enc.get_or<double>("x", 0.0), enc.get_or<double>("y", 0.0),
                                    enc.get_or<double>("yaw", 0.0));
        }
        for (auto& win : window_scene(scene, spec)) {
            out.windows.push_back(std::move(win));
            out.scene_of.push_back(fs::path(file).filename().string());
        }
    }
    if (out.windows.empty()) throw ConfigError("config.data: no usable windows in the input scenes");
    return out;
}

json trajectory_metrics_json(const std::vector<SceneWindow>& windows,
                             const std::vector<PointTrajectories>& preds) {
    double sum_ade = 0, sum_fde = 0, sum_o = 0, sum_v = 0;
    std::int64_t n = 0;
    for (std::size_t i = 0; i < windows.size(); ++i) {
        TrajectoryScore s = score_trajectories(preds[i], windows[i].target);
        sum_ade += s.ade;
        sum_fde += s.fde;
        sum_o += s.orientation;
        sum_v += s.velocity;
        ++n;
    }
    json j;
    j["windows"] = n;
    j["ade"] = sum_ade / n;
    j["fde"] = sum_fde / n;
    j["orientation_deg"] = sum_o / n;
    j["velocity"] = sum_v / n;
    return j;
}

// ----- tasks ---------------------------------------------------------------------------

int task_synth(const Cfg& cfg, const json& resolved) {
    const std::string out_dir = out_dir_of(cfg);
    const std::string scenario = cfg.get<std::string>("scenario");
    const std::uint64_t seed = cfg.get<std::uint64_t>("seed");
    json results;

    if (scenario == "social-forces" || scenario == "constant-velocity") {
        const int scenes = cfg.get_or<int>("scenes", 10);
        const int steps = cfg.get_or<int>("steps", 20);
        const int agents_lo = cfg.get_or<int>("agents_lo", 2);
        const int agents_hi = cfg.get_or<int>("agents_hi", 6);
        fs::create_directories(out_dir + "/scenes");
        Rng rng(seed);
        for (int s = 0; s < scenes; ++s) {
            const int agents = rng.uniform_int(agents_lo, agents_hi);
            Scene scene = scenario == "social-forces"
                              ? gen_social_forces(agents, steps, SFParams{}, rng.next_u64())
                              : gen_constant_velocity(agents, steps, 0.5, 1.8, rng.next_u64());
            char name[64];
            std::snprintf(name, sizeof(name), "scenes/scene_%04d.csv", s);
            write_canonical(out_dir + "/" + name, scene);
        }
        results["scenes"] = scenes;
    } else if (scenario == "discs") {
        const int per_class = cfg.get_or<int>("per_class", 100);
        const int size = cfg.get_or<int>("image_size", 32) + 8;  // stored with crop margin
        const double noise = cfg.get_or<double>("noise", 0.15);
        std::vector<TrafficLightState> classes;
        for (const auto& name : cfg.get_or<std::vector<std::string>>(
                 "classes", {"Red", "Green", "Yellow", "Off"}))
            classes.push_back(traffic_light_from_name(name));
        fs::create_directories(out_dir + "/images");
        Rng rng(seed);
        std::string labels = "filename,label\n";
        int idx = 0;
        for (int i = 0; i < per_class; ++i)
            for (const auto& state : classes) {
                char name[64];
                std::snprintf(name, sizeof(name), "img_%05d.ppm", idx++);
                write_p6(out_dir + "/images/" + name,
                         render_signal_patch(state, size, noise, rng.next_u64()));
                labels += std::string(name) + "," + traffic_light_name(state) + "\n";
            }
        write_text_file(out_dir + "/images/labels.csv", labels);
        results["images"] = idx;
    } else if (scenario == "crossing") {
        WindowSpec spec = window_from(cfg);
        CrossingDatasetConfig dc;
        dc.n_scenes = cfg.get_or<int>("scenes", 120);
        dc.signalized_fraction = cfg.get_or<double>("signalized_fraction", 0.5);
        dc.agents_lo = cfg.get_or<int>("agents_lo", 2);
        dc.agents_hi = cfg.get_or<int>("agents_hi", 5);
        dc.scene_offset = cfg.get_or<double>("scene_offset", 4.5);
        dc.image_size = cfg.get_or<int>("image_size", 32);
        dc.image_noise = cfg.get_or<double>("noise", 0.15);
        dc.window = spec;
        dc.rule = rule_from(cfg);

        fs::create_directories(out_dir + "/scenes");
        fs::create_directories(out_dir + "/images");
        Rng rng(seed);
        std::vector<std::array<std::string, 3>> manifest;
        std::string labels = "filename,label\n";
        int cross = 0, total = 0;
        for (int s = 0; s < dc.n_scenes; ++s) {
            GeneratedCrossingScene gen = gen_crossing_scene(dc, rng);
            char scene_name[64];
            std::snprintf(scene_name, sizeof(scene_name), "scenes/scene_%04d.csv", s);
            write_canonical(out_dir + "/" + scene_name, gen.scene);

            const auto windows = window_scene(gen.scene, spec);
            const auto window_labels = label_crossing(gen.scene, gen.rule, spec);
            for (std::size_t w = 0; w < windows.size(); ++w) {
                char img_name[64];
                std::snprintf(img_name, sizeof(img_name), "img_%05d.ppm", total);
                const TrafficLightState state = window_labels[w].signal_at_decision;
                write_p6(out_dir + "/images/" + img_name,
                         render_signal_patch(state, dc.image_size + 8, dc.image_noise, rng.next_u64()));
                labels += std::string(img_name) + "," + traffic_light_name(state) + "\n";
                manifest.push_back(
                    {std::string(scene_name) + "#" + std::to_string(windows[w].start_frame),
                     "images/" + std::string(img_name),
                     window_labels[w].label == CrossingLabel::Cross ? "Cross" : "DontCross"});
                cross += window_labels[w].label == CrossingLabel::Cross ? 1 : 0;
                ++total;
            }
        }
        write_text_file(out_dir + "/images/labels.csv", labels);
        write_crossing_manifest(out_dir + "/manifest.csv", manifest);
        results["samples"] = total;
        results["cross_fraction"] = total > 0 ? static_cast<double>(cross) / total : 0.0;
    } else {
        throw ConfigError("config.scenario: expected social-forces, constant-velocity, discs or crossing");
    }

    write_run_json(out_dir, "synth", resolved, results);
    return 0;
}

int task_train_mp(const Cfg& cfg, const json& resolved) {
    const std::string out_dir = out_dir_of(cfg);
    WindowSpec spec = window_from(cfg);
    LoadedWindows data = load_windows(cfg, spec);
    IatcnnConfig mc = model_config_from(cfg);

    IatcnnModel model(mc, cfg.get<std::uint64_t>("seed"));
    Cfg train = cfg.at("train");
    MpTrainConfig tc;
    tc.lr = train.get<double>("lr");
    tc.epochs = train.get<int>("epochs");
    tc.batch_size = train.get<int>("batch");
    tc.clip_norm = train.get<double>("clip_norm");
    tc.seed = cfg.get<std::uint64_t>("seed");
    auto result = train_iatcnn(model, data.windows, tc);
    if (train.has("fine_lr") && train.get_or<int>("fine_epochs", 0) > 0) {
        MpTrainConfig fine = tc;
        fine.lr = train.get<double>("fine_lr");
        fine.epochs = train.get<int>("fine_epochs");
        auto r2 = train_iatcnn(model, data.windows, fine);
        result.epoch_loss.insert(result.epoch_loss.end(), r2.epoch_loss.begin(), r2.epoch_loss.end());
        result.weights = r2.weights;
    }

    const std::string ckpt = cfg.get_or<std::string>("checkpoint_out", out_dir + "/iatcnn.ckpt");
    save_iatcnn(model, ckpt);

    json results;
    results["checkpoint"] = ckpt;
    results["parameters"] = model.parameter_count();
    results["epoch_loss"] = result.epoch_loss;
    results["loss_weights"] = {{"s_p", result.weights.s_p},
                               {"s_gamma", result.weights.s_gamma},
                               {"s_mask", result.weights.s_mask}};
    results["normalized_quaternions"] = data.normalized_quaternions;
    write_run_json(out_dir, "train-mp", resolved, results);
    return 0;
}

int task_eval_mp(const Cfg& cfg, const json& resolved) {
    const std::string out_dir = out_dir_of(cfg);
    IatcnnModel model = load_iatcnn(cfg.get<std::string>("checkpoint"));
    WindowSpec spec = window_from(cfg);
    if (spec.t_obs != model.config().t_obs || spec.t_pred != model.config().t_pred ||
        spec.n_max != model.config().n_max)
        throw ConfigError("config.window: does not match the checkpoint's window geometry");
    LoadedWindows data = load_windows(cfg, spec);

    std::vector<PointTrajectories> preds;
    preds.reserve(data.windows.size());
    std::string csv = "scene,start_frame,ade,fde,orientation_deg,velocity,points\n";
    for (std::size_t i = 0; i < data.windows.size(); ++i) {
        preds.push_back(predict_points(model.forward(data.windows[i].obs)));
        TrajectoryScore s = score_trajectories(preds.back(), data.windows[i].target);
        csv += data.scene_of[i] + "," + std::to_string(data.windows[i].start_frame) + "," +
               format_double(s.ade) + "," + format_double(s.fde) + "," + format_double(s.orientation) +
               "," + format_double(s.velocity) + "," + std::to_string(s.points) + "\n";
    }
    write_text_file(out_dir + "/metrics.csv", csv);

    json results;
    results["model"] = trajectory_metrics_json(data.windows, preds);
    if (cfg.get_or<bool>("compare_cv", false)) {
        std::vector<PointTrajectories> cv;
        cv.reserve(data.windows.size());
        for (const auto& win : data.windows)
            cv.push_back(cv_baseline_predict(win.obs, spec.t_pred));
        results["constant_velocity"] = trajectory_metrics_json(data.windows, cv);
    }
    write_run_json(out_dir, "eval-mp", resolved, results);
    return 0;
}

int task_predict(const Cfg& cfg, const json& resolved) {
    const std::string out_dir = out_dir_of(cfg);
    IatcnnModel model = load_iatcnn(cfg.get<std::string>("checkpoint"));
    WindowSpec spec;
    spec.t_obs = model.config().t_obs;
    spec.t_pred = model.config().t_pred;
    spec.n_max = model.config().n_max;
    spec.stride = cfg.has("window") ? cfg.at("window").get_or<int>("stride", spec.total())
                                    : spec.total();
    LoadedWindows data = load_windows(cfg, spec);

    std::string csv = "scene,start_frame,agent_id,step,x,y,v,yaw_deg,mask_prob\n";
    for (std::size_t i = 0; i < data.windows.size(); ++i) {
        const auto& win = data.windows[i];
        PredictionBatch pred = model.forward(win.obs);
        auto points = predict_points(pred);
        for (int a = 0; a < win.obs.active_agents(); ++a)
            for (int t = 0; t < spec.t_pred; ++t)
                csv += data.scene_of[i] + "," + std::to_string(win.start_frame) + "," +
                       std::to_string(win.obs.agent_ids[a]) + "," + std::to_string(t) + "," +
                       format_double(points[a][t].x) + "," + format_double(points[a][t].y) + "," +
                       format_double(points[a][t].v) + "," + format_double(points[a][t].yaw_deg) + "," +
                       format_double(pred.pred_mask.at(a, t)) + "\n";
    }
    write_text_file(out_dir + "/predictions.csv", csv);
    json results;
    results["windows"] = data.windows.size();
    results["predictions_csv"] = out_dir + "/predictions.csv";
    write_run_json(out_dir, "predict", resolved, results);
    return 0;
}

std::vector<std::string> classifier_classes(const Cfg& cfg) {
    auto names = cfg.get_or<std::vector<std::string>>("classes", {"Red", "Green", "Yellow", "Off"});
    if (names.size() < 2) throw ConfigError("config.classes: need at least 2 classes");
    return names;
}

int task_train_tl(const Cfg& cfg, const json& resolved) {
    const std::string out_dir = out_dir_of(cfg);
    const auto classes = classifier_classes(cfg);
    ImageDataset data = load_labeled_images(cfg.get<std::string>("labels_csv"), classes);
    AtteNetConfig ac = classifier_config_from(cfg, static_cast<int>(classes.size()));

    AtteNetModel model(ac, cfg.get<std::uint64_t>("seed"));
    Cfg train = cfg.at("train");
    TlTrainConfig tc;
    tc.lr = train.get<double>("lr");
    tc.momentum = train.get<double>("momentum");
    tc.poly_end_lr = train.get<double>("poly_end_lr");
    tc.epochs = train.get<int>("epochs");
    tc.batch_size = train.get<int>("batch");
    tc.clip_norm = train.get<double>("clip_norm");
    tc.seed = cfg.get<std::uint64_t>("seed");
    auto result = train_classifier(model, data, tc);

    const std::string ckpt = cfg.get_or<std::string>("checkpoint_out", out_dir + "/attenet.ckpt");
    save_attenet(model, ckpt);
    json results;
    results["checkpoint"] = ckpt;
    results["parameters"] = model.parameter_count();
    results["epoch_loss"] = result.epoch_loss;
    results["train_images"] = data.size();
    write_run_json(out_dir, "train-tl", resolved, results);
    return 0;
}

int task_eval_tl(const Cfg& cfg, const json& resolved) {
    const std::string out_dir = out_dir_of(cfg);
    const auto classes = classifier_classes(cfg);
    ImageDataset data = load_labeled_images(cfg.get<std::string>("labels_csv"), classes);
    AtteNetModel model = load_attenet(cfg.get<std::string>("checkpoint"));
    if (model.config().num_classes != static_cast<int>(classes.size()))
        throw ConfigError("config.classes: count does not match the checkpoint head");

    ClassificationReport report = eval_classifier(model, data);
    json results;
    results["accuracy"] = report.accuracy;
    results["precision"] = report.precision;
    results["recall"] = report.recall;
    json confusion = json::array();
    for (int r = 0; r < model.config().num_classes; ++r) {
        json row = json::array();
        for (int c = 0; c < model.config().num_classes; ++c) row.push_back(report.confusion.at(r, c));
        confusion.push_back(row);
    }
    results["confusion_pred_rows_gt_cols"] = confusion;

    // per-class precision-recall curves
    for (std::size_t cls = 0; cls < classes.size(); ++cls) {
        auto scores = class_scores(model, data, static_cast<int>(cls));
        std::vector<int> binary;
        binary.reserve(data.size());
        for (const auto& item : data) binary.push_back(item.label == static_cast<int>(cls) ? 1 : 0);
        std::string csv = "threshold,precision,recall\n";
        for (const auto& p : pr_curve(scores, binary))
            csv += format_double(p.threshold) + "," + format_double(p.precision) + "," +
                   format_double(p.recall) + "\n";
        write_text_file(out_dir + "/pr_" + classes[cls] + ".csv", csv);
    }
    write_run_json(out_dir, "eval-tl", resolved, results);
    return 0;
}

FusionConfig fusion_config_from(const Cfg& cfg, const IatcnnModel* mp, const AtteNetModel* tl,
                                FusionVariant variant) {
    FusionConfig fc;
    fc.variant = variant;
    if (tl != nullptr) {
        fc.c = tl->config().stage_widths.back();
        fc.h = fc.w = tl->config().feature_map_size();
    } else if (cfg.has("fusion")) {
        Cfg f = cfg.at("fusion");
        fc.c = f.get_or<int>("c", fc.c);
        fc.h = f.get_or<int>("h", fc.h);
        fc.w = f.get_or<int>("w", fc.w);
    }
    fc.d = fc.h * fc.w * fc.c;
    if (mp != nullptr) {
        fc.n_max = mp->config().n_max;
        fc.t_pred = mp->config().t_pred;
    }
    fc.traj_scale = 0.25;  // desk default; conditions the projection of metric coordinates
    if (cfg.has("fusion")) {
        Cfg f = cfg.at("fusion");
        fc.hidden = f.get_or<int>("hidden", fc.hidden);
        fc.ncp_hidden = f.get_or<int>("ncp_hidden", fc.ncp_hidden);
        fc.traj_scale = f.get_or<double>("traj_scale", fc.traj_scale);
    }
    fc.tl_classes = static_cast<int>(crossing_tl_classes().size());
    try {
        fc.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("config.fusion: ") + e.what());
    }
    return fc;
}

int task_train_arcp(const Cfg& cfg, const json& resolved) {
    const std::string out_dir = out_dir_of(cfg);
    const FusionVariant variant = fusion_variant_from_name(cfg.get<std::string>("variant"));
    if (variant == FusionVariant::CvTlr)
        throw ConfigError("config.variant: cv-tlr is rule based and needs no training");
    WindowSpec spec = window_from(cfg);
    CrossingDataset data = load_crossing_dataset(cfg.get<std::string>("manifest"), spec);
    const std::uint64_t seed = cfg.get<std::uint64_t>("seed");

    const bool cold = cfg.get_or<bool>("cold_start", false);
    const bool needs_mp = variant != FusionVariant::ArcpTlr;
    const bool needs_tl = variant != FusionVariant::ArcpMp;

    IatcnnModel mp = [&]() {
        if (needs_mp && !cold) return load_iatcnn(cfg.get<std::string>("mp_checkpoint"));
        IatcnnConfig mc = model_config_from(cfg);
        return IatcnnModel(mc, seed + 11);
    }();
    AtteNetModel tl = [&]() {
        if (needs_tl && !cold) return load_attenet(cfg.get<std::string>("tl_checkpoint"));
        AtteNetConfig ac =
            classifier_config_from(cfg, static_cast<int>(crossing_tl_classes().size()));
        return AtteNetModel(ac, seed + 13);
    }();
    if (needs_tl && tl.config().num_classes != static_cast<int>(crossing_tl_classes().size()))
        throw ConfigError("config.tl_checkpoint: classifier must use the Red/Green/Off class set");

    FusionConfig fc = fusion_config_from(cfg, needs_mp ? &mp : nullptr, needs_tl ? &tl : nullptr,
                                         variant);
    FusionHead fusion(fc, seed + 17);

    Cfg train = cfg.at("train");
    JointTrainConfig jc;
    jc.lr = train.get<double>("lr");
    jc.epochs = train.get<int>("epochs");
    jc.batch_size = train.get<int>("batch");
    jc.clip_norm = train.get<double>("clip_norm");
    jc.seed = seed;

    json results;
    if (variant == FusionVariant::Ncp) {
        results["epoch_loss"] = train_ncp(fusion, mp, tl, data, jc);
    } else {
        auto result = joint_train(mp, tl, fusion, data, jc);
        results["epoch_loss"] = result.epoch_loss;
        results["loss_weights"] = {{"s_p", result.s_position},
                                   {"s_gamma", result.s_rotation},
                                   {"s_mask", result.s_mask},
                                   {"s_tl", result.s_tl},
                                   {"s_cross", result.s_cross}};
    }

    if (needs_mp) {
        save_iatcnn(mp, out_dir + "/arcp_mp.ckpt");
        results["mp_checkpoint"] = out_dir + "/arcp_mp.ckpt";
    }
    if (needs_tl) {
        save_attenet(tl, out_dir + "/arcp_tl.ckpt");
        results["tl_checkpoint"] = out_dir + "/arcp_tl.ckpt";
    }
    save_fusion(fusion, out_dir + "/arcp_fusion.ckpt");
    results["fusion_checkpoint"] = out_dir + "/arcp_fusion.ckpt";
    results["samples"] = data.size();
    write_run_json(out_dir, "train-arcp", resolved, results);
    return 0;
}

int task_eval_arcp(const Cfg& cfg, const json& resolved) {
    const std::string out_dir = out_dir_of(cfg);
    const FusionVariant variant = fusion_variant_from_name(cfg.get<std::string>("variant"));
    WindowSpec spec = window_from(cfg);
    CrossingDataset data = load_crossing_dataset(cfg.get<std::string>("manifest"), spec);

    const bool needs_mp = variant != FusionVariant::ArcpTlr && variant != FusionVariant::CvTlr;
    const bool needs_tl = variant != FusionVariant::ArcpMp;
    const bool needs_fusion = variant != FusionVariant::CvTlr;

    std::optional<IatcnnModel> mp;
    std::optional<AtteNetModel> tl;
    std::optional<FusionHead> fusion;
    if (needs_mp) mp.emplace(load_iatcnn(cfg.get<std::string>("mp_checkpoint")));
    if (needs_tl) tl.emplace(load_attenet(cfg.get<std::string>("tl_checkpoint")));
    if (needs_fusion) fusion.emplace(load_fusion(cfg.get<std::string>("fusion_checkpoint")));

    ArcpPipeline pipe;
    pipe.variant = variant;
    if (mp) pipe.mp = &*mp;
    if (tl) pipe.tl = &*tl;
    if (fusion) pipe.fusion = &*fusion;
    pipe.rule = rule_from(cfg);

    CrossingReport report = eval_crossing(pipe, data);
    json results;
    results["safe_precision"] = report.precision;
    results["safe_recall"] = report.recall;
    results["accuracy"] = report.accuracy;
    results["confusion_pred_rows_gt_cols"] = {
        {report.confusion.at(0, 0), report.confusion.at(0, 1)},
        {report.confusion.at(1, 0), report.confusion.at(1, 1)}};
    results["samples"] = data.size();
    write_run_json(out_dir, "eval-arcp", resolved, results);
    return 0;
}

int task_gradcheck(const Cfg& cfg, const json& resolved) {
    const int cases = cfg.get<int>("cases_per_op");
    const int instances = cfg.get<int>("model_instances");
    auto suite = run_full_gradient_suite(cases, instances, cfg.get<std::uint64_t>("seed"));
    for (const auto& item : suite.items)
        std::printf("[%s] %-34s cases=%-4d worst_rel=%.3e %s\n", item.ok ? "PASS" : "FAIL",
                    item.name.c_str(), item.cases, item.worst_rel, item.note.c_str());
    std::printf("gradient suite: %s\n", suite.all_ok ? "PASS" : "FAIL");
    if (cfg.has("out_dir")) {
        json results;
        results["all_ok"] = suite.all_ok;
        results["items"] = json::array();
        for (const auto& item : suite.items)
            results["items"].push_back({{"name", item.name},
                                        {"cases", item.cases},
                                        {"ok", item.ok},
                                        {"worst_rel", item.worst_rel}});
        write_run_json(out_dir_of(cfg), "gradcheck", resolved, results);
    }
    return suite.all_ok ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"interaction-aware motion prediction, traffic-light recognition and "
                 "crossing-safety toolkit"};
    app.require_subcommand(1);

    const std::vector<std::string> tasks = {"synth",     "train-mp", "eval-mp",
                                            "train-tl",  "eval-tl",  "train-arcp",
                                            "eval-arcp", "predict",  "gradcheck"};
    std::string config_path;
    std::vector<std::string> sets;
    for (const auto& task : tasks) {
        CLI::App* sub = app.add_subcommand(task);
        sub->add_option("--config", config_path, "JSON config file");
        sub->add_option("--set", sets, "override config values, key.path=value")->take_all();
    }

    CLI11_PARSE(app, argc, argv);
    const std::string task = app.get_subcommands().front()->get_name();

    try {
        // resolve: defaults(preset) <- file <- --set, with the preset discovered first
        json from_file = json::object();
        if (!config_path.empty()) {
            try {
                from_file = json::parse(read_text_file(config_path));
            } catch (const json::exception& e) {
                throw ConfigError("config file " + config_path + ": " + std::string(e.what()));
            }
            if (!from_file.is_object()) throw ConfigError("config file must hold a JSON object");
        }
        json probe = from_file;
        for (const auto& s : sets) apply_set(probe, s);
        const std::string preset = probe.value("preset", "desk");

        json config = default_config(task, preset);
        merge_into(config, from_file);
        for (const auto& s : sets) apply_set(config, s);

        Cfg cfg(config, "");
        if (task == "synth") return task_synth(cfg, config);
        if (task == "train-mp") return task_train_mp(cfg, config);
        if (task == "eval-mp") return task_eval_mp(cfg, config);
        if (task == "train-tl") return task_train_tl(cfg, config);
        if (task == "eval-tl") return task_eval_tl(cfg, config);
        if (task == "train-arcp") return task_train_arcp(cfg, config);
        if (task == "eval-arcp") return task_eval_arcp(cfg, config);
        if (task == "predict") return task_predict(cfg, config);
        if (task == "gradcheck") return task_gradcheck(cfg, config);
        throw ConfigError("unknown task " + task);
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "runtime error: " << e.what() << "\n";
        return 2;
    }
}
