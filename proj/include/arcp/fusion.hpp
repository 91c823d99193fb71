#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "arcp/attenet.hpp"
#include "arcp/iatcnn.hpp"
#include "arcp/metrics.hpp"
#include "arcp/netpbm.hpp"
#include "arcp/ops.hpp"
#include "arcp/optim.hpp"
#include "arcp/params.hpp"
#include "arcp/synth.hpp"
#include "arcp/trajectory.hpp"

namespace arcp {

// Crossing-safety predictor variants: the learned fusion head over
// trajectory Gaussians and traffic-light features, its single-stream
// ablations, the naive late-fusion classifier and the rule-based
// constant-velocity + traffic-light baseline.
enum class FusionVariant { ArcpTlrMp, ArcpMp, ArcpTlr, Ncp, CvTlr };

inline const char* fusion_variant_name(FusionVariant v) {
    switch (v) {
        case FusionVariant::ArcpTlrMp: return "arcp-tlr-mp";
        case FusionVariant::ArcpMp: return "arcp-mp";
        case FusionVariant::ArcpTlr: return "arcp-tlr";
        case FusionVariant::Ncp: return "ncp";
        case FusionVariant::CvTlr: return "cv-tlr";
    }
    return "?";
}

inline FusionVariant fusion_variant_from_name(const std::string& name) {
    if (name == "arcp-tlr-mp") return FusionVariant::ArcpTlrMp;
    if (name == "arcp-mp") return FusionVariant::ArcpMp;
    if (name == "arcp-tlr") return FusionVariant::ArcpTlr;
    if (name == "ncp") return FusionVariant::Ncp;
    if (name == "cv-tlr") return FusionVariant::CvTlr;
    throw std::invalid_argument("unknown fusion variant '" + name + "'");
}

struct FusionConfig {
    FusionVariant variant = FusionVariant::ArcpTlrMp;
    int d = 128;  // trajectory projection width
    int h = 2;    // reshape target, matches the classifier's final feature map
    int w = 2;
    int c = 32;
    int hidden = 512;
    int n_max = 32;
    int t_pred = 12;
    int tl_classes = 3;      // NCP one-hot width
    int ncp_hidden = 64;     // NCP two-layer head width
    double traj_scale = 1.0;  // fixed input scaling, absorbable into the first layer

    void validate() const {
        if (d != h * w * c)
            throw std::invalid_argument("FusionConfig: D must equal H*W*C, got " + std::to_string(d) +
                                        " vs " + std::to_string(h * w * c));
        if (d < 1 || hidden < 1 || n_max < 1 || t_pred < 1)
            throw std::invalid_argument("FusionConfig: fields must be positive");
        if (variant == FusionVariant::Ncp && (tl_classes < 2 || ncp_hidden < 1))
            throw std::invalid_argument("FusionConfig: bad NCP fields");
        if (traj_scale <= 0) throw std::invalid_argument("FusionConfig: traj_scale must be positive");
    }

    int traj_width() const { return n_max * t_pred * 9; }
    int ncp_input_width() const { return n_max * t_pred * 4 + tl_classes; }
};

// Learned fusion head. ARCP variants: trajectory Gaussians through a dense
// projection to D, reshaped [C x H x W], channel-concatenated with the
// traffic-light feature map (streams omitted per variant), then dense 512
// (ELU) and a 2-way softmax. NCP: hard predictions only, through a small
// two-layer head.
class FusionHead {
public:
    FusionHead(FusionConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
        cfg_.validate();
        if (cfg_.variant == FusionVariant::CvTlr)
            throw std::invalid_argument("FusionHead: cv-tlr is rule based, no parameters");
        Rng rng(seed);
        if (cfg_.variant == FusionVariant::Ncp) {
            const int in = cfg_.ncp_input_width();
            params_.add("fc1.weight", glorot_uniform({cfg_.ncp_hidden, in}, in, cfg_.ncp_hidden, rng));
            params_.add("fc1.bias", Tensor::zeros({cfg_.ncp_hidden}));
            params_.add("fc2.weight",
                        glorot_uniform({2, cfg_.ncp_hidden}, cfg_.ncp_hidden, 2, rng));
            params_.add("fc2.bias", Tensor::zeros({2}));
            return;
        }
        if (uses_trajectories()) {
            const int in = cfg_.traj_width();
            params_.add("traj_proj.weight", glorot_uniform({cfg_.d, in}, in, cfg_.d, rng));
            params_.add("traj_proj.bias", Tensor::zeros({cfg_.d}));
        }
        const int fused_channels = fused_channel_count();
        const int in = fused_channels * cfg_.h * cfg_.w;
        params_.add("fc1.weight", glorot_uniform({cfg_.hidden, in}, in, cfg_.hidden, rng));
        params_.add("fc1.bias", Tensor::zeros({cfg_.hidden}));
        params_.add("fc2.weight", glorot_uniform({2, cfg_.hidden}, cfg_.hidden, 2, rng));
        params_.add("fc2.bias", Tensor::zeros({2}));
    }

    const FusionConfig& config() const { return cfg_; }
    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }

    bool uses_trajectories() const {
        return cfg_.variant == FusionVariant::ArcpTlrMp || cfg_.variant == FusionVariant::ArcpMp ||
               cfg_.variant == FusionVariant::Ncp;
    }
    bool uses_traffic_light() const {
        return cfg_.variant == FusionVariant::ArcpTlrMp || cfg_.variant == FusionVariant::ArcpTlr ||
               cfg_.variant == FusionVariant::Ncp;
    }

    int fused_channel_count() const {
        int ch = 0;
        if (uses_trajectories()) ch += cfg_.c;
        if (uses_traffic_light()) ch += cfg_.c;
        return ch;
    }

    // Differentiable head for the ARCP variants. `traj_vec` is the flattened
    // Gaussian vector [N*T*9], `tl_feats` the [C x H x W] feature map; pass
    // only what the variant consumes.
    Var build_graph(const BoundParams& p, const Var* traj_vec, const Var* tl_feats) const {
        if (cfg_.variant == FusionVariant::Ncp)
            throw std::logic_error("FusionHead: use build_ncp_graph for the NCP variant");
        Var fused;
        bool have = false;
        if (uses_trajectories()) {
            if (traj_vec == nullptr)
                throw std::invalid_argument("FusionHead: variant requires the trajectory stream");
            if (traj_vec->value().size() != cfg_.traj_width())
                throw std::invalid_argument("FusionHead: trajectory vector has wrong length");
            Var scaled = ops::mul_scalar(*traj_vec, cfg_.traj_scale);
            Var proj = ops::dense(scaled, p("traj_proj.weight"), p("traj_proj.bias"));
            fused = ops::reshape(proj, {cfg_.c, cfg_.h, cfg_.w});
            have = true;
        }
        if (uses_traffic_light()) {
            if (tl_feats == nullptr)
                throw std::invalid_argument("FusionHead: variant requires the traffic-light stream");
            const Tensor& tv = tl_feats->value();
            if (tv.ndim() != 3 || tv.dim(0) != cfg_.c || tv.dim(1) != cfg_.h || tv.dim(2) != cfg_.w)
                throw std::invalid_argument("FusionHead: feature map must be [C x H x W] = " +
                                            shape_to_string({cfg_.c, cfg_.h, cfg_.w}) + ", got " +
                                            shape_to_string(tv.shape()));
            fused = have ? ops::concat_rows(fused, *tl_feats) : *tl_feats;
            have = true;
        }
        Var flat = ops::reshape(fused, {fused_channel_count() * cfg_.h * cfg_.w});
        Var hidden = ops::elu(ops::dense(flat, p("fc1.weight"), p("fc1.bias")));
        return ops::dense(hidden, p("fc2.weight"), p("fc2.bias"));
    }

    // NCP head over hard predictions: one-hot traffic-light class plus the
    // flattened point trajectories.
    Var build_ncp_graph(const BoundParams& p, Var input) const {
        if (cfg_.variant != FusionVariant::Ncp)
            throw std::logic_error("FusionHead: build_ncp_graph is NCP only");
        if (input.value().size() != cfg_.ncp_input_width())
            throw std::invalid_argument("FusionHead: NCP input has wrong length");
        Var hidden = ops::elu(ops::dense(ops::mul_scalar(input, cfg_.traj_scale), p("fc1.weight"),
                                         p("fc1.bias")));
        return ops::dense(hidden, p("fc2.weight"), p("fc2.bias"));
    }

private:
    FusionConfig cfg_;
    ParamStore params_;
};

// ----- stream flattening --------------------------------------------------------

// Graph-route flattening of per-agent Gaussian parameter rows into the fixed
// order (agent-major, then time, then mu_x, mu_y, mu_v, sigma_x, sigma_y,
// sigma_v, rho, qw, qz). Agents with an all-zero observation mask contribute
// zeros.
inline Var fusion_traj_vec(Graph& g, const IatcnnModel::GraphOutputs& go,
                           const ObservationBatch& obs, int t_pred) {
    Var out;
    bool first = true;
    for (std::size_t a = 0; a < go.gauss9.size(); ++a) {
        bool active = false;
        for (int t = 0; t < obs.mask.dim(1) && !active; ++t)
            active = obs.mask.at(static_cast<int>(a), t) != 0.0;
        Var flat;
        if (active) {
            flat = ops::reshape(ops::transpose2d(go.gauss9[a]), {t_pred * 9});
        } else {
            flat = g.constant(Tensor::zeros({t_pred * 9}));
        }
        out = first ? flat : ops::concat_rows(out, flat);
        first = false;
    }
    return out;
}

// Value-route counterpart over a decoded prediction batch.
inline Tensor flatten_prediction(const PredictionBatch& pred, const ObservationBatch& obs) {
    Tensor out({pred.n * pred.t_pred * 9});
    std::int64_t k = 0;
    for (int a = 0; a < pred.n; ++a) {
        bool active = false;
        for (int t = 0; t < obs.mask.dim(1) && !active; ++t) active = obs.mask.at(a, t) != 0.0;
        for (int t = 0; t < pred.t_pred; ++t) {
            if (!active) {
                k += 9;
                continue;
            }
            const GaussianParams& gp = pred.gauss(a, t);
            out[k++] = gp.mu_x;
            out[k++] = gp.mu_y;
            out[k++] = gp.mu_v;
            out[k++] = gp.sigma_x;
            out[k++] = gp.sigma_y;
            out[k++] = gp.sigma_v;
            out[k++] = gp.rho;
            out[k++] = pred.quat(a, t)[0];
            out[k++] = pred.quat(a, t)[1];
        }
    }
    return out;
}

// NCP input: one-hot recognised light class followed by point trajectories
// (x, y, v, yaw in degrees), inactive agents as zeros.
inline Tensor ncp_input(const PointTrajectories& points, const ObservationBatch& obs, int n_max,
                        int t_pred, int tl_class, int tl_classes) {
    Tensor out({n_max * t_pred * 4 + tl_classes});
    std::int64_t k = 0;
    for (int a = 0; a < n_max; ++a) {
        bool active = false;
        for (int t = 0; t < obs.mask.dim(1) && !active; ++t) active = obs.mask.at(a, t) != 0.0;
        for (int t = 0; t < t_pred; ++t) {
            if (active) {
                out[k] = points[a][t].x;
                out[k + 1] = points[a][t].y;
                out[k + 2] = points[a][t].v;
                out[k + 3] = points[a][t].yaw_deg;
            }
            k += 4;
        }
    }
    out[k + tl_class] = 1.0;
    return out;
}

// ----- constant-velocity baseline --------------------------------------------------

// Extrapolates each agent's last observed velocity linearly over the
// prediction horizon; yaw held constant; agents with fewer than 2 observed
// frames keep their last position with zero velocity.
inline PointTrajectories cv_baseline_predict(const ObservationBatch& obs, int t_pred,
                                             double frame_rate = 2.5) {
    const int n = obs.mask.dim(0);
    const int t_obs = obs.mask.dim(1);
    PointTrajectories out(static_cast<std::size_t>(n));
    for (int a = 0; a < n; ++a) {
        out[a].assign(static_cast<std::size_t>(t_pred), PointState{});
        int last = -1, prev = -1;
        for (int t = 0; t < t_obs; ++t)
            if (obs.mask.at(a, t) != 0.0) {
                prev = last;
                last = t;
            }
        if (last < 0) continue;  // inactive slot
        const double lx = obs.features.at(a, last, 0);
        const double ly = obs.features.at(a, last, 1);
        const double yaw_deg =
            2.0 * std::atan2(obs.features.at(a, last, 4), obs.features.at(a, last, 3)) * 180.0 / M_PI;
        double step_x = 0.0, step_y = 0.0;
        if (prev >= 0) {
            const double span = static_cast<double>(last - prev);
            step_x = (lx - obs.features.at(a, prev, 0)) / span;
            step_y = (ly - obs.features.at(a, prev, 1)) / span;
        }
        const double speed = std::hypot(step_x, step_y) * frame_rate;
        // steps measured from the last observed frame; the first predicted
        // frame sits (t_obs - last) frames after it
        const int gap = t_obs - last;
        for (int t = 0; t < t_pred; ++t) {
            PointState p;
            p.x = lx + step_x * static_cast<double>(gap + t);
            p.y = ly + step_y * static_cast<double>(gap + t);
            p.v = speed;
            p.yaw_deg = yaw_deg;
            out[a][t] = p;
        }
    }
    return out;
}

// ----- crossing dataset ---------------------------------------------------------------

struct CrossingSample {
    ObservationBatch obs;
    TargetBatch target;
    Tensor image;  // stored at classifier input size + 8 per side
    int tl_label = 0;
    CrossingLabel label = CrossingLabel::DontCross;
};

using CrossingDataset = std::vector<CrossingSample>;

inline const std::vector<TrafficLightState>& crossing_tl_classes() {
    static const std::vector<TrafficLightState> classes = {
        TrafficLightState::Red, TrafficLightState::Green, TrafficLightState::Off};
    return classes;
}

inline int tl_class_index(TrafficLightState s) {
    const auto& classes = crossing_tl_classes();
    for (std::size_t i = 0; i < classes.size(); ++i)
        if (classes[i] == s) return static_cast<int>(i);
    throw std::invalid_argument("tl_class_index: state not in the crossing class set");
}

struct CrossingDatasetConfig {
    int n_scenes = 120;
    double signalized_fraction = 0.5;
    int agents_lo = 2, agents_hi = 5;
    double scene_offset = 4.5;  // scenes shift uniformly within +-offset per axis
    int image_size = 32;        // stored at image_size + 8
    double image_noise = 0.15;
    WindowSpec window;  // t_obs 8, t_pred 12, stride 20, n_max from the MP model
    CrossingRule rule;  // corridor + horizon; phases are drawn per scene
    SFParams sf;
};

struct GeneratedCrossingScene {
    Scene scene;
    CrossingRule rule;  // cfg.rule plus this scene's signal phases
};

// One crowd scene for the crossing task: agents walk around a shifted ring
// centre, so the corridor's time-to-collision varies from imminent to never;
// signalized scenes get a Red/Green schedule with an occasional mid-window
// switch.
inline GeneratedCrossingScene gen_crossing_scene(const CrossingDatasetConfig& cfg, Rng& rng) {
    GeneratedCrossingScene out;
    const std::uint64_t scene_seed = rng.next_u64();
    const int agents = rng.uniform_int(cfg.agents_lo, cfg.agents_hi);
    out.scene = gen_social_forces(agents, cfg.window.total(), cfg.sf, scene_seed);
    const double off_x = rng.uniform(-cfg.scene_offset, cfg.scene_offset);
    const double off_y = rng.uniform(-cfg.scene_offset, cfg.scene_offset);
    for (auto& track : out.scene.tracks)
        for (auto& s : track.samples) {
            s.x += off_x;
            s.y += off_y;
        }
    out.rule = cfg.rule;
    if (rng.uniform() < cfg.signalized_fraction) {
        const bool start_green = rng.bernoulli(0.55);
        out.rule.phases = {{0, start_green ? TrafficLightState::Green : TrafficLightState::Red}};
        if (rng.bernoulli(0.4)) {
            const std::int64_t flip = rng.uniform_int(1, cfg.window.total() - 1);
            out.rule.phases.push_back(
                {flip, start_green ? TrafficLightState::Red : TrafficLightState::Green});
        }
    }
    return out;
}

// Seeded synthetic intersection set: social-forces scenes around a crossing
// corridor; half the scenes run a Red/Green signal schedule, the rest are
// unsignalized. The label requires both a permissive signal and a clear
// corridor, so neither stream alone can decide it.
inline CrossingDataset make_crossing_dataset(const CrossingDatasetConfig& cfg, std::uint64_t seed) {
    cfg.rule.validate();
    cfg.window.validate();
    Rng rng(seed);
    CrossingDataset out;
    for (int s = 0; s < cfg.n_scenes; ++s) {
        GeneratedCrossingScene gen = gen_crossing_scene(cfg, rng);
        const auto windows = window_scene(gen.scene, cfg.window);
        const auto labels = label_crossing(gen.scene, gen.rule, cfg.window);
        for (std::size_t w = 0; w < windows.size(); ++w) {
            CrossingSample sample;
            sample.obs = windows[w].obs;
            sample.target = windows[w].target;
            sample.label = labels[w].label;
            const TrafficLightState state = labels[w].signal_at_decision;
            sample.tl_label = tl_class_index(state);
            sample.image = render_signal_patch(state, cfg.image_size + 8, cfg.image_noise,
                                               rng.next_u64());
            out.push_back(std::move(sample));
        }
    }
    return out;
}

// ----- prediction pipeline ---------------------------------------------------------

// Bundles the trained subnetworks behind one per-sample crossing decision.
struct ArcpPipeline {
    FusionVariant variant = FusionVariant::ArcpTlrMp;
    const IatcnnModel* mp = nullptr;
    const AtteNetModel* tl = nullptr;
    const FusionHead* fusion = nullptr;
    CrossingRule rule;         // cv-tlr corridor/horizon
    double frame_rate = 2.5;   // cv-tlr horizon conversion

    std::array<double, 2> predict_probs(const CrossingSample& sample) const {
        if (variant == FusionVariant::CvTlr) {
            const int label = cv_tlr_decision(sample);
            return {label == 0 ? 1.0 : 0.0, label == 1 ? 1.0 : 0.0};
        }
        if (fusion == nullptr) throw std::invalid_argument("ArcpPipeline: fusion head missing");
        Graph g;
        BoundParams p = BoundParams::frozen(g, fusion->params());

        if (variant == FusionVariant::Ncp) {
            if (mp == nullptr || tl == nullptr)
                throw std::invalid_argument("ArcpPipeline: NCP needs both subnetworks");
            PredictionBatch pred = mp->forward(sample.obs);
            auto probs = tl->forward_classify(center_crop(sample.image, tl->config().input_size));
            const int cls =
                static_cast<int>(std::max_element(probs.begin(), probs.end()) - probs.begin());
            Tensor in = ncp_input(predict_points(pred), sample.obs, pred.n, pred.t_pred, cls,
                                  fusion->config().tl_classes);
            Var logits = fusion->build_ncp_graph(p, g.constant(in));
            auto sm = softmax({logits.value()[0], logits.value()[1]});
            return {sm[0], sm[1]};
        }

        Var traj, feats;
        const Var* traj_ptr = nullptr;
        const Var* feats_ptr = nullptr;
        if (fusion->uses_trajectories()) {
            if (mp == nullptr) throw std::invalid_argument("ArcpPipeline: MP model missing");
            traj = g.constant(flatten_prediction(mp->forward(sample.obs), sample.obs));
            traj_ptr = &traj;
        }
        if (fusion->uses_traffic_light()) {
            if (tl == nullptr) throw std::invalid_argument("ArcpPipeline: TL model missing");
            feats = g.constant(tl->forward_features(center_crop(sample.image, tl->config().input_size)));
            feats_ptr = &feats;
        }
        Var logits = fusion->build_graph(p, traj_ptr, feats_ptr);
        auto sm = softmax({logits.value()[0], logits.value()[1]});
        return {sm[0], sm[1]};
    }

    int predict(const CrossingSample& sample) const {
        auto probs = predict_probs(sample);
        return probs[1] >= probs[0] ? 1 : 0;
    }

    // Rule-based baseline: don't cross on a recognised red light, otherwise
    // don't cross when any constant-velocity extrapolation enters the
    // corridor within the horizon.
    int cv_tlr_decision(const CrossingSample& sample) const {
        if (tl == nullptr) throw std::invalid_argument("ArcpPipeline: cv-tlr needs the TL model");
        auto probs = tl->forward_classify(center_crop(sample.image, tl->config().input_size));
        const int cls = static_cast<int>(std::max_element(probs.begin(), probs.end()) - probs.begin());
        if (crossing_tl_classes()[static_cast<std::size_t>(cls)] == TrafficLightState::Red) return 0;
        const int t_pred = sample.target.mask.dim(1);
        const int horizon_frames =
            static_cast<int>(std::llround(rule.horizon * frame_rate));
        PointTrajectories points = cv_baseline_predict(sample.obs, t_pred, frame_rate);
        for (int a = 0; a < sample.obs.mask.dim(0); ++a) {
            bool active = false;
            for (int t = 0; t < sample.obs.mask.dim(1) && !active; ++t)
                active = sample.obs.mask.at(a, t) != 0.0;
            if (!active) continue;
            for (int t = 0; t < std::min(t_pred, horizon_frames); ++t)
                if (rule.inside_corridor(points[a][t].x, points[a][t].y)) return 0;
        }
        return 1;
    }
};

// Safe-class metrics: a true positive needs both groundtruth and prediction
// to say Cross. Confusion rows are predictions, columns groundtruth.
struct CrossingReport {
    double precision = 0.0;
    double recall = 0.0;
    double accuracy = 0.0;
    Tensor confusion;
};

inline CrossingReport crossing_report(const std::vector<int>& pred, const std::vector<int>& gt) {
    auto rep = classification_report(pred, gt, 2);
    CrossingReport out;
    out.precision = rep.precision[1];
    out.recall = rep.recall[1];
    out.accuracy = rep.accuracy;
    out.confusion = rep.confusion;
    return out;
}

inline CrossingReport eval_crossing(const ArcpPipeline& pipeline, const CrossingDataset& dataset) {
    if (dataset.empty()) throw std::invalid_argument("eval_crossing: empty dataset");
    std::vector<int> pred, gt;
    pred.reserve(dataset.size());
    gt.reserve(dataset.size());
    for (const auto& sample : dataset) {
        pred.push_back(pipeline.predict(sample));
        gt.push_back(sample.label == CrossingLabel::Cross ? 1 : 0);
    }
    return crossing_report(pred, gt);
}

// ----- joint training ------------------------------------------------------------------

struct JointTrainConfig {
    double lr = 5e-5;
    int epochs = 100;
    int batch_size = 10;
    double clip_norm = 10.0;
    std::uint64_t seed = 1;
};

struct JointTrainResult {
    std::vector<double> epoch_loss;
    double s_position = 0, s_rotation = 0, s_mask = 0, s_tl = 0, s_cross = 0;
};

// One optimizer over every parameter of the three networks plus the five
// learnable task weights; task losses combine as sum_k L_k * exp(-s_k) + s_k.
inline JointTrainResult joint_train(IatcnnModel& mp, AtteNetModel& tl, FusionHead& fusion,
                                    const CrossingDataset& dataset, const JointTrainConfig& cfg) {
    if (dataset.empty()) throw std::invalid_argument("joint_train: empty dataset");
    if (fusion.config().variant == FusionVariant::Ncp || fusion.config().variant == FusionVariant::CvTlr)
        throw std::invalid_argument("joint_train: only the learned ARCP variants train jointly");
    if (fusion.uses_trajectories() &&
        (fusion.config().n_max != mp.config().n_max || fusion.config().t_pred != mp.config().t_pred))
        throw std::invalid_argument("joint_train: fusion and MP window shapes disagree");
    if (fusion.uses_traffic_light()) {
        const int fm = tl.config().feature_map_size();
        if (fusion.config().h != fm || fusion.config().w != fm ||
            fusion.config().c != tl.config().stage_widths.back())
            throw std::invalid_argument("joint_train: fusion feature-map shape does not match the classifier");
    }

    ParamStore all;
    auto import = [&all](const ParamStore& src, const std::string& prefix) {
        for (const auto& name : src.names()) all.add(prefix + name, src.get(name));
    };
    import(mp.params(), "mp.");
    import(tl.params(), "tl.");
    import(fusion.params(), "fusion.");
    all.add("loss.s_p", Tensor::scalar(0.0));
    all.add("loss.s_gamma", Tensor::scalar(0.0));
    all.add("loss.s_mask", Tensor::scalar(0.0));
    all.add("loss.s_tl", Tensor::scalar(0.0));
    all.add("loss.s_cross", Tensor::scalar(0.0));

    Optimizer opt = Optimizer::adam(cfg.lr);
    Rng rng(cfg.seed);
    std::vector<std::size_t> order(dataset.size());
    std::iota(order.begin(), order.end(), 0);

    const int crop = tl.config().input_size;
    JointTrainResult result;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(order);
        double epoch_sum = 0.0;
        std::int64_t seen = 0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
            Graph g;
            BoundParams bp(g, all);

            BoundParams mp_view = BoundParams::prefixed(bp, "mp.");
            BoundParams tl_view = BoundParams::prefixed(bp, "tl.");
            BoundParams fusion_view = BoundParams::prefixed(bp, "fusion.");

            Var pos, rot, msk, tll, crs;
            bool first = true;

            // classifier runs as one batch so batchnorm sees all crops
            std::vector<Tensor> crops;
            for (std::size_t k = start; k < end; ++k)
                crops.push_back(random_crop(dataset[order[k]].image, crop, rng));
            std::vector<AtteNetModel::GraphOut> tl_outs;
            if (fusion.uses_traffic_light())
                tl_outs = tl.build_batch_graph(g, tl_view, crops, Mode::Train, &rng);

            for (std::size_t k = start; k < end; ++k) {
                const CrossingSample& sample = dataset[order[k]];
                Var sample_traj;
                const Var* traj_ptr = nullptr;
                Var l_pos, l_rot, l_msk;
                if (fusion.uses_trajectories()) {
                    auto go = mp.build_graph(g, mp_view, sample.obs);
                    auto terms = mp.build_loss_terms(g, go, sample.target);
                    l_pos = terms.position;
                    l_rot = terms.rotation;
                    l_msk = terms.mask;
                    sample_traj = fusion_traj_vec(g, go, sample.obs, mp.config().t_pred);
                    traj_ptr = &sample_traj;
                }
                Var l_tl;
                const Var* feats_ptr = nullptr;
                Var feats;
                if (fusion.uses_traffic_light()) {
                    l_tl = ops::softmax_cross_entropy(tl_outs[k - start].logits, sample.tl_label);
                    feats = tl_outs[k - start].res5;
                    feats_ptr = &feats;
                }
                Var logits = fusion.build_graph(fusion_view, traj_ptr, feats_ptr);
                Var l_cross =
                    ops::softmax_cross_entropy(logits, sample.label == CrossingLabel::Cross ? 1 : 0);

                if (first) {
                    if (fusion.uses_trajectories()) {
                        pos = l_pos;
                        rot = l_rot;
                        msk = l_msk;
                    }
                    if (fusion.uses_traffic_light()) tll = l_tl;
                    crs = l_cross;
                    first = false;
                } else {
                    if (fusion.uses_trajectories()) {
                        pos = ops::add(pos, l_pos);
                        rot = ops::add(rot, l_rot);
                        msk = ops::add(msk, l_msk);
                    }
                    if (fusion.uses_traffic_light()) tll = ops::add(tll, l_tl);
                    crs = ops::add(crs, l_cross);
                }
            }

            const double inv = 1.0 / static_cast<double>(end - start);
            auto weighted = [&g, &bp, inv](Var term, const char* s_name) {
                Var mean_term = ops::mul_scalar(term, inv);
                Var s = bp(s_name);
                return ops::add(ops::mul(mean_term, ops::exp(ops::neg(s))), s);
            };
            Var total = weighted(crs, "loss.s_cross");
            if (fusion.uses_trajectories()) {
                total = ops::add(total, weighted(pos, "loss.s_p"));
                total = ops::add(total, weighted(rot, "loss.s_gamma"));
                total = ops::add(total, weighted(msk, "loss.s_mask"));
            }
            if (fusion.uses_traffic_light()) total = ops::add(total, weighted(tll, "loss.s_tl"));

            g.backward(total);
            GradMap grads = collect_grads(g, bp, all);
            clip_global_norm(grads, cfg.clip_norm);
            opt.step(all, grads);
            epoch_sum += total.value()[0] * static_cast<double>(end - start);
            seen += static_cast<std::int64_t>(end - start);
        }
        result.epoch_loss.push_back(epoch_sum / static_cast<double>(seen));
    }

    auto export_back = [&all](ParamStore& dst, const std::string& prefix) {
        for (const auto& name : dst.names()) dst.get(name) = all.get(prefix + name);
    };
    export_back(mp.params(), "mp.");
    export_back(tl.params(), "tl.");
    export_back(fusion.params(), "fusion.");
    result.s_position = all.get("loss.s_p")[0];
    result.s_rotation = all.get("loss.s_gamma")[0];
    result.s_mask = all.get("loss.s_mask")[0];
    result.s_tl = all.get("loss.s_tl")[0];
    result.s_cross = all.get("loss.s_cross")[0];
    return result;
}

// The naive predictor trains only its own head on the frozen subnetworks'
// hard predictions.
inline std::vector<double> train_ncp(FusionHead& head, const IatcnnModel& mp, const AtteNetModel& tl,
                                     const CrossingDataset& dataset, const JointTrainConfig& cfg) {
    if (dataset.empty()) throw std::invalid_argument("train_ncp: empty dataset");
    if (head.config().variant != FusionVariant::Ncp)
        throw std::invalid_argument("train_ncp: head is not the NCP variant");

    // hard predictions are fixed, precompute them once
    std::vector<Tensor> inputs;
    std::vector<int> labels;
    inputs.reserve(dataset.size());
    for (const auto& sample : dataset) {
        PredictionBatch pred = mp.forward(sample.obs);
        auto probs = tl.forward_classify(center_crop(sample.image, tl.config().input_size));
        const int cls = static_cast<int>(std::max_element(probs.begin(), probs.end()) - probs.begin());
        inputs.push_back(ncp_input(predict_points(pred), sample.obs, pred.n, pred.t_pred, cls,
                                   head.config().tl_classes));
        labels.push_back(sample.label == CrossingLabel::Cross ? 1 : 0);
    }

    Optimizer opt = Optimizer::adam(cfg.lr);
    Rng rng(cfg.seed);
    std::vector<std::size_t> order(dataset.size());
    std::iota(order.begin(), order.end(), 0);
    std::vector<double> history;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(order);
        double epoch_sum = 0.0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
            Graph g;
            BoundParams bp(g, head.params());
            Var loss;
            for (std::size_t k = start; k < end; ++k) {
                Var logits = head.build_ncp_graph(bp, g.constant(inputs[order[k]]));
                Var ce = ops::softmax_cross_entropy(logits, labels[order[k]]);
                loss = k == start ? ce : ops::add(loss, ce);
            }
            loss = ops::mul_scalar(loss, 1.0 / static_cast<double>(end - start));
            g.backward(loss);
            GradMap grads = collect_grads(g, bp, head.params());
            clip_global_norm(grads, cfg.clip_norm);
            opt.step(head.params(), grads);
            epoch_sum += loss.value()[0] * static_cast<double>(end - start);
        }
        history.push_back(epoch_sum / static_cast<double>(dataset.size()));
    }
    return history;
}

// ----- manifest I/O -------------------------------------------------------------

// Crossing dataset manifest: CSV `window_id,image_file,label` where
// window_id is `<scene csv path>#<window start frame>` and paths are
// relative to the manifest's directory. Traffic-light labels for the images
// come from a `labels.csv` next to the images.
inline void write_crossing_manifest(const std::string& path,
                                    const std::vector<std::array<std::string, 3>>& rows) {
    std::string out = "window_id,image_file,label\n";
    for (const auto& row : rows) out += row[0] + "," + row[1] + "," + row[2] + "\n";
    write_text_file(path, out);
}

inline CrossingDataset load_crossing_dataset(const std::string& manifest_path, const WindowSpec& spec) {
    const std::string text = read_text_file(manifest_path);
    std::string dir;
    if (auto pos = manifest_path.find_last_of('/'); pos != std::string::npos)
        dir = manifest_path.substr(0, pos + 1);

    struct Row {
        std::string scene;
        std::int64_t start;
        std::string image;
        CrossingLabel label;
    };
    std::vector<Row> rows;
    std::size_t lineno = 0, at = 0;
    while (at < text.size()) {
        std::size_t end = text.find('\n', at);
        if (end == std::string::npos) end = text.size();
        std::string line = strip_cr(text.substr(at, end - at));
        at = end + 1;
        ++lineno;
        if (line.empty()) continue;
        if (lineno == 1 && line == "window_id,image_file,label") continue;
        auto fields = split_csv_line(line);
        if (fields.size() != 3)
            throw std::runtime_error("manifest " + manifest_path + " line " + std::to_string(lineno) +
                                     ": expected 'window_id,image_file,label'");
        const auto hash = fields[0].find('#');
        std::int64_t start = 0;
        if (hash == std::string::npos || !parse_int64(fields[0].substr(hash + 1), start))
            throw std::runtime_error("manifest " + manifest_path + " line " + std::to_string(lineno) +
                                     ": bad window_id '" + fields[0] + "'");
        Row row;
        row.scene = fields[0].substr(0, hash);
        row.start = start;
        row.image = fields[1];
        if (fields[2] == "Cross")
            row.label = CrossingLabel::Cross;
        else if (fields[2] == "DontCross")
            row.label = CrossingLabel::DontCross;
        else
            throw std::runtime_error("manifest " + manifest_path + " line " + std::to_string(lineno) +
                                     ": unknown label '" + fields[2] + "'");
        rows.push_back(std::move(row));
    }

    // window each referenced scene once
    std::map<std::string, std::vector<SceneWindow>> windows_by_scene;
    for (const auto& row : rows)
        if (!windows_by_scene.count(row.scene))
            windows_by_scene[row.scene] = window_scene(load_canonical(dir + row.scene).scene, spec);

    // image labels live next to the images
    std::map<std::string, int> tl_labels;
    std::set<std::string> parsed_label_files;
    for (const auto& row : rows) {
        std::string img_dir;
        if (auto pos = row.image.find_last_of('/'); pos != std::string::npos)
            img_dir = row.image.substr(0, pos + 1);
        const std::string labels_file = dir + img_dir + "labels.csv";
        if (!parsed_label_files.insert(labels_file).second) continue;
        const std::string ltext = read_text_file(labels_file);
        std::size_t lat = 0;
        std::size_t lln = 0;
        while (lat < ltext.size()) {
            std::size_t lend = ltext.find('\n', lat);
            if (lend == std::string::npos) lend = ltext.size();
            std::string lline = strip_cr(ltext.substr(lat, lend - lat));
            lat = lend + 1;
            ++lln;
            if (lline.empty() || (lln == 1 && lline == "filename,label")) continue;
            auto lf = split_csv_line(lline);
            if (lf.size() != 2)
                throw std::runtime_error("labels " + labels_file + ": bad line " + std::to_string(lln));
            tl_labels[img_dir + lf[0]] = tl_class_index(traffic_light_from_name(lf[1]));
        }
    }

    CrossingDataset out;
    for (const auto& row : rows) {
        const auto& wins = windows_by_scene.at(row.scene);
        const SceneWindow* found = nullptr;
        for (const auto& win : wins)
            if (win.start_frame == row.start) found = &win;
        if (found == nullptr)
            throw std::runtime_error("manifest " + manifest_path + ": no window at frame " +
                                     std::to_string(row.start) + " in " + row.scene);
        CrossingSample sample;
        sample.obs = found->obs;
        sample.target = found->target;
        sample.image = read_p6(dir + row.image);
        auto it = tl_labels.find(row.image);
        if (it == tl_labels.end())
            throw std::runtime_error("manifest " + manifest_path + ": no traffic-light label for " +
                                     row.image);
        sample.tl_label = it->second;
        sample.label = row.label;
        out.push_back(std::move(sample));
    }
    return out;
}

}  // namespace arcp
