#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "arcp/graph.hpp"
#include "arcp/metrics.hpp"
#include "arcp/ops.hpp"
#include "arcp/optim.hpp"
#include "arcp/params.hpp"
#include "arcp/rng.hpp"
#include "arcp/tensor.hpp"
#include "arcp/trajectory.hpp"

namespace arcp {

// Interaction-aware temporal convolutional trajectory predictor. Three causal
// blocks of dilated convolutions over each agent's feature rows plus a shared
// social-context stream, a time-distributed affine head of width 9 for the
// Gaussian/quaternion outputs and a parallel 1-wide sigmoid mask head.
struct IatcnnConfig {
    enum class Variant { Tcnn, LinConv, DResTcnn };

    Variant variant = Variant::Tcnn;
    int kernel_size = 30;
    std::vector<int> filters = {128, 128, 128};
    int convs_per_block = 1;
    int feature_width = 5;
    bool context_channels = true;  // append the masked per-timestep mean over agents
    double input_scale = 1.0;      // applied to features before the first convolution
    int t_obs = 8;
    int t_pred = 12;
    int n_max = 32;

    void validate() const {
        if (filters.size() != 3) throw std::invalid_argument("IatcnnConfig: exactly 3 causal blocks");
        for (int f : filters)
            if (f < 1) throw std::invalid_argument("IatcnnConfig: filters must be positive");
        if (kernel_size < 1) throw std::invalid_argument("IatcnnConfig: kernel_size must be >= 1");
        if (convs_per_block < 1) throw std::invalid_argument("IatcnnConfig: convs_per_block must be >= 1");
        if (feature_width != 5) throw std::invalid_argument("IatcnnConfig: feature width is fixed at 5");
        if (t_obs < 1 || t_pred < 1 || n_max < 1)
            throw std::invalid_argument("IatcnnConfig: window fields must be positive");
        if (t_pred < t_obs)
            throw std::invalid_argument("IatcnnConfig: prediction interval must be >= observation interval");
        if (variant == Variant::LinConv && convs_per_block != 1)
            throw std::invalid_argument("IatcnnConfig: IA-LinConv uses a single convolution per block");
        if (variant == Variant::DResTcnn && filters[0] != filters[1])
            throw std::invalid_argument(
                "IatcnnConfig: IA-DResTCNN needs filters[0] == filters[1] for the identity skip");
        if (input_scale <= 0) throw std::invalid_argument("IatcnnConfig: input_scale must be positive");
    }

    int input_channels() const { return feature_width * (context_channels ? 2 : 1); }
    int t_total() const { return t_obs + t_pred; }

    // Dilation per (block, conv): 1 everywhere for IA-LinConv, otherwise
    // increasing by 1 for each following convolution across the stack.
    std::vector<std::vector<int>> dilations() const {
        std::vector<std::vector<int>> d(3);
        int next = 1;
        for (int b = 0; b < 3; ++b)
            for (int c = 0; c < convs_per_block; ++c)
                d[b].push_back(variant == Variant::LinConv ? 1 : next++);
        return d;
    }
};

inline const char* iatcnn_variant_name(IatcnnConfig::Variant v) {
    switch (v) {
        case IatcnnConfig::Variant::Tcnn: return "ia-tcnn";
        case IatcnnConfig::Variant::LinConv: return "ia-linconv";
        case IatcnnConfig::Variant::DResTcnn: return "ia-drestcnn";
    }
    return "?";
}

inline IatcnnConfig::Variant iatcnn_variant_from_name(const std::string& name) {
    if (name == "ia-tcnn") return IatcnnConfig::Variant::Tcnn;
    if (name == "ia-linconv") return IatcnnConfig::Variant::LinConv;
    if (name == "ia-drestcnn") return IatcnnConfig::Variant::DResTcnn;
    throw std::invalid_argument("unknown IA-TCNN variant '" + name + "'");
}

// Per-timestep output distribution: bivariate Gaussian over (x, y) with
// correlation rho, independent univariate Gaussian over speed.
struct GaussianParams {
    double mu_x = 0, mu_y = 0, mu_v = 0;
    double sigma_x = 1, sigma_y = 1, sigma_v = 1;
    double rho = 0;
};

struct PredictionBatch {
    int n = 0;
    int t_pred = 0;
    std::vector<GaussianParams> gaussians;         // [n * t_pred], agent-major
    std::vector<std::array<double, 2>> quats;      // normalized (qw, qz), agent-major
    Tensor mask_logits;                            // [n, t_pred]
    Tensor pred_mask;                              // sigmoid(mask_logits)

    const GaussianParams& gauss(int i, int t) const {
        return gaussians[static_cast<std::size_t>(i) * t_pred + t];
    }
    const std::array<double, 2>& quat(int i, int t) const {
        return quats[static_cast<std::size_t>(i) * t_pred + t];
    }
};

// Learnable task weights of the trajectory loss (Eq. 3 style: each task term
// enters as L * exp(-s) + s).
struct LossWeights {
    double s_p = 0.0;
    double s_gamma = 0.0;
    double s_mask = 0.0;
};

namespace detail {

constexpr double kLogTwoPi = 1.8378770664093454836;  // ln(2*pi)
constexpr double kQuatNormEps = 1e-30;

}  // namespace detail

class IatcnnModel {
public:
    IatcnnModel(IatcnnConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
        cfg_.validate();
        Rng rng(seed);
        int cin = cfg_.input_channels();
        for (int b = 0; b < 3; ++b) {
            for (int c = 0; c < cfg_.convs_per_block; ++c) {
                const int cout = cfg_.filters[static_cast<std::size_t>(b)];
                const std::string prefix = layer_name(b, c);
                params_.add(prefix + ".weight",
                            glorot_uniform({cout, cin, cfg_.kernel_size}, cin * cfg_.kernel_size,
                                           cout * cfg_.kernel_size, rng));
                params_.add(prefix + ".bias", Tensor::zeros({cout}));
                cin = cout;
            }
        }
        const int c3 = cfg_.filters[2];
        params_.add("head.weight", glorot_uniform({9, c3}, c3, 9, rng));
        // bias the raw qw channel to 1 so the quaternion head starts at the
        // identity rotation and its normalisation never sits on the q = 0 cliff
        Tensor head_bias = Tensor::zeros({9});
        head_bias[7] = 1.0;
        params_.add("head.bias", head_bias);
        params_.add("mask_head.weight", glorot_uniform({1, c3}, c3, 1, rng));
        params_.add("mask_head.bias", Tensor::zeros({1}));
    }

    const IatcnnConfig& config() const { return cfg_; }
    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }
    std::int64_t parameter_count() const { return params_.total_size(); }

    static std::string layer_name(int block, int conv) {
        return "block" + std::to_string(block + 1) + ".conv" + std::to_string(conv + 1);
    }

    // Masked, scaled, context-augmented input rows, one [Cin x T_total]
    // tensor per agent slot. Masked-out feature entries never reach the
    // network: every row is multiplied by its validity mask first.
    std::vector<Tensor> build_agent_inputs(const ObservationBatch& obs) const {
        if (obs.mask.ndim() != 2 || obs.mask.dim(0) != cfg_.n_max || obs.mask.dim(1) != cfg_.t_obs)
            throw std::invalid_argument("IatcnnModel: observation mask shape mismatch, expected " +
                                        shape_to_string({cfg_.n_max, cfg_.t_obs}) + " got " +
                                        shape_to_string(obs.mask.shape()));
        if (obs.features.ndim() != 3 || obs.features.dim(0) != cfg_.n_max ||
            obs.features.dim(1) != cfg_.t_obs || obs.features.dim(2) != cfg_.feature_width)
            throw std::invalid_argument("IatcnnModel: observation feature shape mismatch");

        const int n = cfg_.n_max, to = cfg_.t_obs, tt = cfg_.t_total(), f = cfg_.feature_width;
        std::vector<Tensor> rows(static_cast<std::size_t>(n), Tensor::zeros({cfg_.input_channels(), tt}));
        Tensor context = Tensor::zeros({f, tt});
        for (int t = 0; t < to; ++t) {
            double present = 0.0;
            for (int a = 0; a < n; ++a) present += obs.mask.at(a, t);
            const double inv = present > 0.0 ? 1.0 / present : 0.0;
            for (int a = 0; a < n; ++a) {
                const double m = obs.mask.at(a, t);
                for (int c = 0; c < f; ++c) {
                    const double v = m * obs.features.at(a, t, c) * cfg_.input_scale;
                    rows[static_cast<std::size_t>(a)].at(c, t) = v;
                    context.at(c, t) += v * inv;
                }
            }
        }
        if (cfg_.context_channels) {
            for (int a = 0; a < n; ++a)
                for (int c = 0; c < f; ++c)
                    for (int t = 0; t < tt; ++t)
                        rows[static_cast<std::size_t>(a)].at(f + c, t) = context.at(c, t);
        }
        return rows;
    }

    // Everything the downstream consumers need from one differentiable pass.
    struct GraphOutputs {
        std::vector<Var> raw_pred;     // per agent, [9 x t_pred] raw head output
        std::vector<Var> gauss9;       // per agent, [9 x t_pred] transformed (mu, sigma, rho, qhat)
        std::vector<Var> mask_logits;  // per agent, [1 x t_pred]
        std::vector<std::vector<Var>> block_acts;  // per agent, per block, [C x t_total]
    };

    GraphOutputs build_graph(Graph& g, const BoundParams& p, const ObservationBatch& obs) const {
        const auto inputs = build_agent_inputs(obs);
        const auto dil = cfg_.dilations();
        GraphOutputs out;
        // Agent slots with an all-zero mask share the same all-zero input, so
        // one padding trunk serves every inactive slot.
        int pad_slot = -1;
        for (int a = 0; a < cfg_.n_max; ++a) {
            bool active = false;
            for (int t = 0; t < cfg_.t_obs && !active; ++t) active = obs.mask.at(a, t) != 0.0;
            if (!active && pad_slot >= 0) {
                out.raw_pred.push_back(out.raw_pred[static_cast<std::size_t>(pad_slot)]);
                out.gauss9.push_back(out.gauss9[static_cast<std::size_t>(pad_slot)]);
                out.mask_logits.push_back(out.mask_logits[static_cast<std::size_t>(pad_slot)]);
                out.block_acts.push_back(out.block_acts[static_cast<std::size_t>(pad_slot)]);
                continue;
            }
            if (!active) pad_slot = a;

            Var h = g.constant(inputs[static_cast<std::size_t>(a)]);
            std::vector<Var> acts;
            for (int b = 0; b < 3; ++b) {
                Var block_in = h;
                for (int c = 0; c < cfg_.convs_per_block; ++c) {
                    const std::string prefix = layer_name(b, c);
                    h = ops::add_rowwise(
                        ops::causal_conv1d(h, p(prefix + ".weight"),
                                           dil[static_cast<std::size_t>(b)][static_cast<std::size_t>(c)]),
                        p(prefix + ".bias"));
                }
                if (cfg_.variant == IatcnnConfig::Variant::DResTcnn && b == 1)
                    h = ops::relu(ops::add(h, block_in));  // residual causal block
                else
                    h = ops::tanh(h);
                acts.push_back(h);
            }
            Var trunk_pred = ops::crop_cols(h, cfg_.t_obs, cfg_.t_total());
            Var raw = ops::dense(trunk_pred, p("head.weight"), p("head.bias"));
            Var mask_logit = ops::dense(trunk_pred, p("mask_head.weight"), p("mask_head.bias"));

            Var mu = ops::slice_rows(raw, 0, 3);
            Var sigma = ops::exp(ops::slice_rows(raw, 3, 6));
            Var rho = ops::tanh(ops::slice_rows(raw, 6, 7));
            Var qw = ops::slice_rows(raw, 7, 8);
            Var qz = ops::slice_rows(raw, 8, 9);
            Var qnorm = ops::sqrt(ops::add_scalar(ops::add(ops::square(qw), ops::square(qz)),
                                                  detail::kQuatNormEps));
            Var gauss9 = ops::concat_rows(
                ops::concat_rows(ops::concat_rows(mu, sigma), rho),
                ops::concat_rows(ops::div(qw, qnorm), ops::div(qz, qnorm)));

            out.raw_pred.push_back(raw);
            out.gauss9.push_back(gauss9);
            out.mask_logits.push_back(mask_logit);
            out.block_acts.push_back(std::move(acts));
        }
        return out;
    }

    // Inference pass: frozen parameters, decoded outputs.
    PredictionBatch forward(const ObservationBatch& obs) const {
        Graph g;
        BoundParams p = BoundParams::frozen(g, params_);
        GraphOutputs go = build_graph(g, p, obs);
        return decode(go);
    }

    // Inference pass that also returns every post-block activation, one
    // [C x t_total] tensor per (agent, block); used by the causality probes.
    PredictionBatch forward_traced(const ObservationBatch& obs,
                                   std::vector<std::vector<Tensor>>& activations) const {
        Graph g;
        BoundParams p = BoundParams::frozen(g, params_);
        GraphOutputs go = build_graph(g, p, obs);
        activations.clear();
        for (const auto& per_agent : go.block_acts) {
            std::vector<Tensor> acts;
            for (const Var& v : per_agent) acts.push_back(v.value());
            activations.push_back(std::move(acts));
        }
        return decode(go);
    }

    PredictionBatch decode(const GraphOutputs& go) const {
        PredictionBatch pred;
        pred.n = cfg_.n_max;
        pred.t_pred = cfg_.t_pred;
        pred.mask_logits = Tensor::zeros({cfg_.n_max, cfg_.t_pred});
        pred.pred_mask = Tensor::zeros({cfg_.n_max, cfg_.t_pred});
        for (int a = 0; a < cfg_.n_max; ++a) {
            const Tensor& g9 = go.gauss9[static_cast<std::size_t>(a)].value();
            const Tensor& ml = go.mask_logits[static_cast<std::size_t>(a)].value();
            for (int t = 0; t < cfg_.t_pred; ++t) {
                GaussianParams gp;
                gp.mu_x = g9.at(0, t);
                gp.mu_y = g9.at(1, t);
                gp.mu_v = g9.at(2, t);
                gp.sigma_x = g9.at(3, t);
                gp.sigma_y = g9.at(4, t);
                gp.sigma_v = g9.at(5, t);
                gp.rho = g9.at(6, t);
                pred.gaussians.push_back(gp);
                pred.quats.push_back({g9.at(7, t), g9.at(8, t)});
                const double logit = ml.at(0, t);
                pred.mask_logits.at(a, t) = logit;
                pred.pred_mask.at(a, t) =
                    logit >= 0.0 ? 1.0 / (1.0 + std::exp(-logit)) : std::exp(logit) / (1.0 + std::exp(logit));
            }
        }
        return pred;
    }

    // Summed per-task losses of one window (before the learnable weighting).
    struct LossTerms {
        Var position;  // negative log likelihood of (x, y, v)
        Var rotation;  // L2 distance between target and predicted quaternions
        Var mask;      // binary cross entropy of the mask head
    };

    LossTerms build_loss_terms(Graph& g, const GraphOutputs& go, const TargetBatch& target) const {
        if (target.mask.ndim() != 2 || target.mask.dim(0) != cfg_.n_max ||
            target.mask.dim(1) != cfg_.t_pred)
            throw std::invalid_argument("IatcnnModel: target mask shape mismatch");
        const int tp = cfg_.t_pred;
        Var ones = g.constant(Tensor({1, tp}, 1.0));

        LossTerms terms;
        bool first = true;
        for (int a = 0; a < cfg_.n_max; ++a) {
            Tensor tx({1, tp}), ty({1, tp}), tv({1, tp}), tqw({1, tp}), tqz({1, tp}), tm({1, tp});
            for (int t = 0; t < tp; ++t) {
                tx.at(0, t) = target.features.at(a, t, 0);
                ty.at(0, t) = target.features.at(a, t, 1);
                tv.at(0, t) = target.features.at(a, t, 2);
                tqw.at(0, t) = target.features.at(a, t, 3);
                tqz.at(0, t) = target.features.at(a, t, 4);
                tm.at(0, t) = target.mask.at(a, t);
            }
            Var raw = go.raw_pred[static_cast<std::size_t>(a)];
            Var g9 = go.gauss9[static_cast<std::size_t>(a)];
            Var m = g.constant(tm);

            Var dx = ops::sub(g.constant(tx), ops::slice_rows(g9, 0, 1));
            Var dy = ops::sub(g.constant(ty), ops::slice_rows(g9, 1, 2));
            Var dv = ops::sub(g.constant(tv), ops::slice_rows(g9, 2, 3));
            Var lsx = ops::slice_rows(raw, 3, 4);
            Var lsy = ops::slice_rows(raw, 4, 5);
            Var lsv = ops::slice_rows(raw, 5, 6);
            Var sx = ops::slice_rows(g9, 3, 4);
            Var sy = ops::slice_rows(g9, 4, 5);
            Var sv = ops::slice_rows(g9, 5, 6);
            Var rho = ops::slice_rows(g9, 6, 7);

            Var zx = ops::div(dx, sx);
            Var zy = ops::div(dy, sy);
            Var one_minus_r2 = ops::sub(ones, ops::square(rho));
            Var quad_num = ops::sub(ops::add(ops::square(zx), ops::square(zy)),
                                    ops::mul_scalar(ops::mul(ops::mul(rho, zx), zy), 2.0));
            Var nll_xy = ops::add(
                ops::add(ops::add_scalar(ops::add(lsx, lsy), detail::kLogTwoPi),
                         ops::mul_scalar(ops::log(one_minus_r2), 0.5)),
                ops::div(quad_num, ops::mul_scalar(one_minus_r2, 2.0)));
            Var nll_v = ops::add(ops::add_scalar(lsv, 0.5 * detail::kLogTwoPi),
                                 ops::div(ops::square(dv), ops::mul_scalar(ops::square(sv), 2.0)));
            Var lp = ops::sum(ops::mul(ops::add(nll_xy, nll_v), m));

            Var dqw = ops::sub(g.constant(tqw), ops::slice_rows(g9, 7, 8));
            Var dqz = ops::sub(g.constant(tqz), ops::slice_rows(g9, 8, 9));
            Var lgamma = ops::sum(ops::mul(ops::hypot2(dqw, dqz), m));

            Var lmask = ops::sum(ops::bce_with_logits(go.mask_logits[static_cast<std::size_t>(a)], m));

            if (first) {
                terms.position = lp;
                terms.rotation = lgamma;
                terms.mask = lmask;
                first = false;
            } else {
                terms.position = ops::add(terms.position, lp);
                terms.rotation = ops::add(terms.rotation, lgamma);
                terms.mask = ops::add(terms.mask, lmask);
            }
        }
        return terms;
    }

    // L * exp(-s) + s for each task term.
    static Var combine_loss(Graph& g, const LossTerms& terms, Var s_p, Var s_gamma, Var s_mask) {
        Var total = ops::add(ops::mul(terms.position, ops::exp(ops::neg(s_p))), s_p);
        total = ops::add(total, ops::add(ops::mul(terms.rotation, ops::exp(ops::neg(s_gamma))), s_gamma));
        total = ops::add(total, ops::add(ops::mul(terms.mask, ops::exp(ops::neg(s_mask))), s_mask));
        return total;
    }

private:
    IatcnnConfig cfg_;
    ParamStore params_;
};

// ----- value-route loss (independent of the graph code path) ------------------

struct LossBreakdown {
    double position = 0.0;
    double rotation = 0.0;
    double mask = 0.0;
    double total = 0.0;
};

// Computes the Eq. 3 style loss directly from decoded predictions. Positions
// with a zero target mask contribute nothing; non-positive sigmas indicate a
// broken forward pass and are rejected.
inline LossBreakdown iatcnn_loss_value(const PredictionBatch& pred, const TargetBatch& target,
                                       const LossWeights& weights) {
    if (target.mask.ndim() != 2 || target.mask.dim(0) != pred.n || target.mask.dim(1) != pred.t_pred)
        throw std::invalid_argument("iatcnn_loss_value: target/prediction shape mismatch");
    LossBreakdown out;
    for (int i = 0; i < pred.n; ++i)
        for (int t = 0; t < pred.t_pred; ++t) {
            const double m = target.mask.at(i, t);
            const double logit = pred.mask_logits.at(i, t);
            out.mask += std::max(logit, 0.0) - logit * m + std::log1p(std::exp(-std::abs(logit)));
            if (m == 0.0) continue;
            const GaussianParams& gp = pred.gauss(i, t);
            if (!(gp.sigma_x > 0) || !(gp.sigma_y > 0) || !(gp.sigma_v > 0))
                throw std::invalid_argument("iatcnn_loss_value: non-positive sigma at a masked-in position");
            const double zx = (target.features.at(i, t, 0) - gp.mu_x) / gp.sigma_x;
            const double zy = (target.features.at(i, t, 1) - gp.mu_y) / gp.sigma_y;
            const double r2 = 1.0 - gp.rho * gp.rho;
            const double nll_xy = detail::kLogTwoPi + std::log(gp.sigma_x) + std::log(gp.sigma_y) +
                                  0.5 * std::log(r2) +
                                  (zx * zx + zy * zy - 2.0 * gp.rho * zx * zy) / (2.0 * r2);
            const double zv = (target.features.at(i, t, 2) - gp.mu_v) / gp.sigma_v;
            const double nll_v = 0.5 * detail::kLogTwoPi + std::log(gp.sigma_v) + 0.5 * zv * zv;
            out.position += m * (nll_xy + nll_v);
            const double dqw = target.features.at(i, t, 3) - pred.quat(i, t)[0];
            const double dqz = target.features.at(i, t, 4) - pred.quat(i, t)[1];
            out.rotation += m * std::sqrt(dqw * dqw + dqz * dqz);
        }
    out.total = out.position * std::exp(-weights.s_p) + weights.s_p +
                out.rotation * std::exp(-weights.s_gamma) + weights.s_gamma +
                out.mask * std::exp(-weights.s_mask) + weights.s_mask;
    return out;
}

// Gaussian means plus decoded yaw as trajectory point estimates.
inline PointTrajectories predict_points(const PredictionBatch& pred) {
    PointTrajectories out(static_cast<std::size_t>(pred.n));
    for (int i = 0; i < pred.n; ++i) {
        out[i].resize(static_cast<std::size_t>(pred.t_pred));
        for (int t = 0; t < pred.t_pred; ++t) {
            const GaussianParams& gp = pred.gauss(i, t);
            PointState p;
            p.x = gp.mu_x;
            p.y = gp.mu_y;
            p.v = gp.mu_v;
            p.yaw_deg = 2.0 * std::atan2(pred.quat(i, t)[1], pred.quat(i, t)[0]) * 180.0 / M_PI;
            out[i][t] = p;
        }
    }
    return out;
}

// ----- training ---------------------------------------------------------------

struct MpTrainConfig {
    double lr = 5e-4;
    int epochs = 100;
    int batch_size = 12;
    double clip_norm = 10.0;
    std::uint64_t seed = 1;
};

struct MpTrainResult {
    std::vector<double> epoch_loss;  // mean per-window total loss
    LossWeights weights;
};

// Adam with gradient clipping over the network parameters and the three
// learnable loss weights.
inline MpTrainResult train_iatcnn(IatcnnModel& model, const std::vector<SceneWindow>& data,
                                  const MpTrainConfig& cfg) {
    if (data.empty()) throw std::invalid_argument("train_iatcnn: empty dataset");
    if (cfg.epochs < 1 || cfg.batch_size < 1) throw std::invalid_argument("train_iatcnn: bad hyperparams");

    ParamStore all;
    for (const auto& name : model.params().names()) all.add(name, model.params().get(name));
    all.add("loss.s_p", Tensor::scalar(0.0));
    all.add("loss.s_gamma", Tensor::scalar(0.0));
    all.add("loss.s_mask", Tensor::scalar(0.0));

    Optimizer opt = Optimizer::adam(cfg.lr);
    Rng rng(cfg.seed);
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), 0);

    MpTrainResult result;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(order);
        double epoch_sum = 0.0;
        std::int64_t windows_seen = 0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
            Graph g;
            BoundParams bp(g, all);
            Var batch_pos, batch_rot, batch_mask;
            bool first = true;
            for (std::size_t k = start; k < end; ++k) {
                const SceneWindow& win = data[order[k]];
                auto go = model.build_graph(g, bp, win.obs);
                auto terms = model.build_loss_terms(g, go, win.target);
                if (first) {
                    batch_pos = terms.position;
                    batch_rot = terms.rotation;
                    batch_mask = terms.mask;
                    first = false;
                } else {
                    batch_pos = ops::add(batch_pos, terms.position);
                    batch_rot = ops::add(batch_rot, terms.rotation);
                    batch_mask = ops::add(batch_mask, terms.mask);
                }
            }
            const double inv_batch = 1.0 / static_cast<double>(end - start);
            IatcnnModel::LossTerms mean_terms{ops::mul_scalar(batch_pos, inv_batch),
                                              ops::mul_scalar(batch_rot, inv_batch),
                                              ops::mul_scalar(batch_mask, inv_batch)};
            Var loss = IatcnnModel::combine_loss(g, mean_terms, bp("loss.s_p"), bp("loss.s_gamma"),
                                                 bp("loss.s_mask"));
            g.backward(loss);
            GradMap grads = collect_grads(g, bp, all);
            clip_global_norm(grads, cfg.clip_norm);
            opt.step(all, grads);
            epoch_sum += loss.value()[0] * static_cast<double>(end - start);
            windows_seen += static_cast<std::int64_t>(end - start);
        }
        result.epoch_loss.push_back(epoch_sum / static_cast<double>(windows_seen));
    }

    for (const auto& name : model.params().names()) model.params().get(name) = all.get(name);
    result.weights.s_p = all.get("loss.s_p")[0];
    result.weights.s_gamma = all.get("loss.s_gamma")[0];
    result.weights.s_mask = all.get("loss.s_mask")[0];
    return result;
}

}  // namespace arcp
