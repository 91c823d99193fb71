#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "arcp/gradcheck.hpp"
#include "arcp/iatcnn.hpp"
#include "arcp/metrics.hpp"
#include "arcp/rng.hpp"
#include "arcp/synth.hpp"
#include "arcp/trajectory.hpp"

using namespace arcp;

namespace {

IatcnnConfig tiny_config(IatcnnConfig::Variant variant = IatcnnConfig::Variant::Tcnn) {
    IatcnnConfig cfg;
    cfg.variant = variant;
    cfg.kernel_size = 3;
    cfg.filters = {4, 4, 4};
    cfg.t_obs = 3;
    cfg.t_pred = 4;
    cfg.n_max = 3;
    return cfg;
}

ObservationBatch random_obs(const IatcnnConfig& cfg, Rng& rng, double mask_density = 0.8) {
    ObservationBatch obs;
    obs.features = Tensor::zeros({cfg.n_max, cfg.t_obs, 5});
    obs.mask = Tensor::zeros({cfg.n_max, cfg.t_obs});
    for (int a = 0; a < cfg.n_max; ++a) {
        bool any = false;
        for (int t = 0; t < cfg.t_obs; ++t) {
            if (rng.uniform() < mask_density) {
                obs.mask.at(a, t) = 1.0;
                any = true;
                for (int c = 0; c < 5; ++c) obs.features.at(a, t, c) = rng.uniform(-2, 2);
            }
        }
        if (any) obs.agent_ids.push_back(a);
    }
    return obs;
}

// Target presence is restricted to agents observed in `obs`, matching the
// contract established by window_scene.
TargetBatch random_target(const IatcnnConfig& cfg, Rng& rng, const ObservationBatch& obs,
                          double mask_density = 0.8) {
    TargetBatch t;
    t.features = Tensor::zeros({cfg.n_max, cfg.t_pred, 5});
    t.mask = Tensor::zeros({cfg.n_max, cfg.t_pred});
    for (int a = 0; a < cfg.n_max; ++a) {
        bool observed = false;
        for (int k = 0; k < cfg.t_obs; ++k) observed = observed || obs.mask.at(a, k) != 0.0;
        if (!observed) continue;
        for (int k = 0; k < cfg.t_pred; ++k)
            if (rng.uniform() < mask_density) {
                t.mask.at(a, k) = 1.0;
                t.features.at(a, k, 0) = rng.uniform(-2, 2);
                t.features.at(a, k, 1) = rng.uniform(-2, 2);
                t.features.at(a, k, 2) = rng.uniform(0, 2);
                const double yaw = rng.uniform(-M_PI, M_PI);
                t.features.at(a, k, 3) = std::cos(yaw / 2);
                t.features.at(a, k, 4) = std::sin(yaw / 2);
            }
    }
    return t;
}

// builds the full training loss for the current parameter values
double loss_forward(const IatcnnModel& model, const ParamStore& all, const ObservationBatch& obs,
                    const TargetBatch& target) {
    Graph g;
    BoundParams bp(g, all);
    auto go = model.build_graph(g, bp, obs);
    auto terms = model.build_loss_terms(g, go, target);
    return IatcnnModel::combine_loss(g, terms, bp("loss.s_p"), bp("loss.s_gamma"), bp("loss.s_mask"))
        .value()[0];
}

ParamStore with_loss_weights(const IatcnnModel& model, double s = 0.0) {
    ParamStore all;
    for (const auto& name : model.params().names()) all.add(name, model.params().get(name));
    all.add("loss.s_p", Tensor::scalar(s));
    all.add("loss.s_gamma", Tensor::scalar(s));
    all.add("loss.s_mask", Tensor::scalar(s));
    return all;
}

}  // namespace

TEST_CASE("model construction") {
    SECTION("variant dilation schedules") {
        IatcnnConfig base = tiny_config();
        base.convs_per_block = 1;
        REQUIRE(base.dilations() == std::vector<std::vector<int>>{{1}, {2}, {3}});
        base.convs_per_block = 2;
        REQUIRE(base.dilations() == std::vector<std::vector<int>>{{1, 2}, {3, 4}, {5, 6}});

        IatcnnConfig lin = tiny_config(IatcnnConfig::Variant::LinConv);
        REQUIRE(lin.dilations() == std::vector<std::vector<int>>{{1}, {1}, {1}});
        lin.convs_per_block = 2;
        REQUIRE_THROWS_AS(lin.validate(), std::invalid_argument);

        IatcnnConfig res = tiny_config(IatcnnConfig::Variant::DResTcnn);
        REQUIRE(res.dilations() == std::vector<std::vector<int>>{{1}, {2}, {3}});
        res.filters = {4, 8, 4};
        REQUIRE_THROWS_AS(res.validate(), std::invalid_argument);
    }
    SECTION("same seed gives identical parameters") {
        IatcnnModel a(tiny_config(), 5), b(tiny_config(), 5), c(tiny_config(), 6);
        bool all_same = true, any_diff = false;
        for (const auto& name : a.params().names()) {
            const Tensor& ta = a.params().get(name);
            const Tensor& tb = b.params().get(name);
            const Tensor& tc = c.params().get(name);
            for (std::int64_t i = 0; i < ta.size(); ++i) {
                all_same = all_same && ta[i] == tb[i];
                any_diff = any_diff || ta[i] != tc[i];
            }
        }
        REQUIRE(all_same);
        REQUIRE(any_diff);
    }
    SECTION("parameter count matches the analytic formula") {
        IatcnnConfig cfg;  // paper-scale defaults
        IatcnnModel model(cfg, 1);
        const int cin = cfg.input_channels();
        const int k = cfg.kernel_size;
        std::int64_t want = 0;
        int prev = cin;
        for (int b = 0; b < 3; ++b) {
            want += static_cast<std::int64_t>(cfg.filters[b]) * prev * k + cfg.filters[b];
            prev = cfg.filters[b];
        }
        want += 9LL * prev + 9;  // gaussian/quaternion head
        want += prev + 1;        // mask head
        REQUIRE(model.parameter_count() == want);
    }
    SECTION("invalid configs rejected") {
        IatcnnConfig cfg = tiny_config();
        cfg.filters = {4, 4};
        REQUIRE_THROWS_AS(cfg.validate(), std::invalid_argument);
        cfg = tiny_config();
        cfg.t_pred = 1;  // below t_obs
        REQUIRE_THROWS_AS(cfg.validate(), std::invalid_argument);
    }
}

TEST_CASE("forward pass output validity") {
    Rng rng(8);
    SECTION("all-zero input stays finite with positive sigma") {
        IatcnnConfig cfg = tiny_config();
        IatcnnModel model(cfg, 3);
        ObservationBatch obs;
        obs.features = Tensor::zeros({cfg.n_max, cfg.t_obs, 5});
        obs.mask = Tensor::zeros({cfg.n_max, cfg.t_obs});
        PredictionBatch pred = model.forward(obs);
        for (const auto& gp : pred.gaussians) {
            REQUIRE(std::isfinite(gp.mu_x));
            REQUIRE(gp.sigma_x > 0);
            REQUIRE(gp.sigma_y > 0);
            REQUIRE(gp.sigma_v > 0);
        }
    }
    SECTION("random fuzz keeps sigma > 0, |rho| < 1 and unit quats") {
        for (int variant = 0; variant < 3; ++variant) {
            IatcnnConfig cfg = tiny_config(static_cast<IatcnnConfig::Variant>(variant));
            IatcnnModel model(cfg, 100 + variant);
            for (int trial = 0; trial < 100; ++trial) {
                ObservationBatch obs = random_obs(cfg, rng);
                PredictionBatch pred = model.forward(obs);
                for (int i = 0; i < pred.n; ++i)
                    for (int t = 0; t < pred.t_pred; ++t) {
                        const auto& gp = pred.gauss(i, t);
                        REQUIRE(gp.sigma_x > 0);
                        REQUIRE(gp.sigma_y > 0);
                        REQUIRE(gp.sigma_v > 0);
                        REQUIRE(std::abs(gp.rho) < 1.0);
                        const auto& q = pred.quat(i, t);
                        REQUIRE(std::abs(std::hypot(q[0], q[1]) - 1.0) < 1e-6);
                    }
            }
        }
    }
    SECTION("duplicated agent rows produce identical outputs") {
        IatcnnConfig cfg = tiny_config();
        IatcnnModel model(cfg, 4);
        ObservationBatch obs = random_obs(cfg, rng, 1.0);
        for (int t = 0; t < cfg.t_obs; ++t) {
            obs.mask.at(1, t) = obs.mask.at(0, t);
            for (int c = 0; c < 5; ++c) obs.features.at(1, t, c) = obs.features.at(0, t, c);
        }
        PredictionBatch pred = model.forward(obs);
        for (int t = 0; t < cfg.t_pred; ++t) {
            REQUIRE(pred.gauss(0, t).mu_x == pred.gauss(1, t).mu_x);
            REQUIRE(pred.gauss(0, t).sigma_y == pred.gauss(1, t).sigma_y);
            REQUIRE(pred.quat(0, t) == pred.quat(1, t));
            REQUIRE(pred.mask_logits.at(0, t) == pred.mask_logits.at(1, t));
        }
    }
    SECTION("shape mismatch rejected") {
        IatcnnConfig cfg = tiny_config();
        IatcnnModel model(cfg, 4);
        ObservationBatch obs;
        obs.features = Tensor::zeros({cfg.n_max, cfg.t_obs + 1, 5});
        obs.mask = Tensor::zeros({cfg.n_max, cfg.t_obs + 1});
        REQUIRE_THROWS_AS(model.forward(obs), std::invalid_argument);
    }
}

TEST_CASE("architecture-level causality") {
    Rng rng(9);
    for (int variant = 0; variant < 3; ++variant) {
        IatcnnConfig cfg = tiny_config(static_cast<IatcnnConfig::Variant>(variant));
        IatcnnModel model(cfg, 50 + variant);
        for (int trial = 0; trial < 10; ++trial) {
            ObservationBatch obs = random_obs(cfg, rng, 1.0);
            std::vector<std::vector<Tensor>> base_acts;
            model.forward_traced(obs, base_acts);

            const int tp = rng.uniform_int(1, cfg.t_obs - 1);
            const int agent = rng.uniform_int(0, cfg.n_max - 1);
            ObservationBatch pert = obs;
            pert.features.at(agent, tp, rng.uniform_int(0, 4)) += rng.uniform(0.5, 2.0);
            std::vector<std::vector<Tensor>> pert_acts;
            model.forward_traced(pert, pert_acts);

            for (std::size_t a = 0; a < base_acts.size(); ++a)
                for (std::size_t b = 0; b < base_acts[a].size(); ++b) {
                    const Tensor& x = base_acts[a][b];
                    const Tensor& y = pert_acts[a][b];
                    for (int c = 0; c < x.dim(0); ++c)
                        for (int t = 0; t < tp; ++t)
                            REQUIRE(std::abs(x.at(c, t) - y.at(c, t)) < 1e-12);
                }
        }
    }
}

TEST_CASE("loss against closed forms") {
    SECTION("targets at the mean with unit sigma and zero rho") {
        // hand-built prediction: mu == target, sigma = 1, rho = 0, exact quats
        const int n = 2, tp = 3;
        PredictionBatch pred;
        pred.n = n;
        pred.t_pred = tp;
        pred.mask_logits = Tensor::zeros({n, tp});
        pred.pred_mask = Tensor::full({n, tp}, 0.5);
        TargetBatch target;
        target.features = Tensor::zeros({n, tp, 5});
        target.mask = Tensor::zeros({n, tp});
        Rng rng(10);
        for (int i = 0; i < n; ++i)
            for (int t = 0; t < tp; ++t) {
                GaussianParams gp;
                gp.mu_x = rng.uniform(-3, 3);
                gp.mu_y = rng.uniform(-3, 3);
                gp.mu_v = rng.uniform(0, 2);
                pred.gaussians.push_back(gp);
                const double yaw = rng.uniform(-M_PI, M_PI);
                pred.quats.push_back({std::cos(yaw / 2), std::sin(yaw / 2)});
                target.mask.at(i, t) = 1.0;
                target.features.at(i, t, 0) = gp.mu_x;
                target.features.at(i, t, 1) = gp.mu_y;
                target.features.at(i, t, 2) = gp.mu_v;
                target.features.at(i, t, 3) = std::cos(yaw / 2);
                target.features.at(i, t, 4) = std::sin(yaw / 2);
            }
        auto breakdown = iatcnn_loss_value(pred, target, LossWeights{});
        const double per_point = breakdown.position / (n * tp);
        REQUIRE(per_point == Catch::Approx(1.5 * std::log(2 * M_PI)).margin(1e-9));
        REQUIRE(per_point == Catch::Approx(2.756815).margin(1e-6));
        REQUIRE(breakdown.rotation == Catch::Approx(0.0).margin(1e-12));
        // zero weights: total is the plain sum of the task terms
        REQUIRE(breakdown.total ==
                Catch::Approx(breakdown.position + breakdown.rotation + breakdown.mask).margin(1e-12));
    }

    SECTION("graph route equals the value route") {
        Rng rng(11);
        for (int variant = 0; variant < 3; ++variant) {
            IatcnnConfig cfg = tiny_config(static_cast<IatcnnConfig::Variant>(variant));
            IatcnnModel model(cfg, 60 + variant);
            for (int trial = 0; trial < 10; ++trial) {
                ObservationBatch obs = random_obs(cfg, rng);
                TargetBatch target = random_target(cfg, rng, obs);
                LossWeights w{rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5)};

                Graph g;
                ParamStore all = with_loss_weights(model);
                all.get("loss.s_p")[0] = w.s_p;
                all.get("loss.s_gamma")[0] = w.s_gamma;
                all.get("loss.s_mask")[0] = w.s_mask;
                BoundParams bp(g, all);
                auto go = model.build_graph(g, bp, obs);
                auto terms = model.build_loss_terms(g, go, target);
                Var loss = IatcnnModel::combine_loss(g, terms, bp("loss.s_p"), bp("loss.s_gamma"),
                                                     bp("loss.s_mask"));

                auto breakdown = iatcnn_loss_value(model.forward(obs), target, w);
                REQUIRE(loss.value()[0] == Catch::Approx(breakdown.total).epsilon(1e-10));
                REQUIRE(terms.position.value()[0] == Catch::Approx(breakdown.position).epsilon(1e-10));
                REQUIRE(terms.rotation.value()[0] == Catch::Approx(breakdown.rotation).epsilon(1e-10));
                REQUIRE(terms.mask.value()[0] == Catch::Approx(breakdown.mask).epsilon(1e-10));
            }
        }
    }

    SECTION("flipping a masked-out feature changes nothing") {
        IatcnnConfig cfg = tiny_config();
        IatcnnModel model(cfg, 12);
        Rng rng(13);
        ObservationBatch obs = random_obs(cfg, rng, 0.6);
        TargetBatch target = random_target(cfg, rng, obs, 0.6);
        ParamStore all = with_loss_weights(model, 0.1);

        auto grads_of = [&](const ObservationBatch& o, const TargetBatch& tg) {
            Graph g;
            BoundParams bp(g, all);
            auto go = model.build_graph(g, bp, o);
            auto terms = model.build_loss_terms(g, go, tg);
            Var loss = IatcnnModel::combine_loss(g, terms, bp("loss.s_p"), bp("loss.s_gamma"),
                                                 bp("loss.s_mask"));
            g.backward(loss);
            return std::make_pair(loss.value()[0], collect_grads(g, bp, all));
        };

        auto [base_loss, base_grads] = grads_of(obs, target);

        ObservationBatch obs2 = obs;
        TargetBatch target2 = target;
        for (int a = 0; a < cfg.n_max; ++a) {
            for (int t = 0; t < cfg.t_obs; ++t)
                if (obs2.mask.at(a, t) == 0.0)
                    for (int c = 0; c < 5; ++c) obs2.features.at(a, t, c) = rng.uniform(-10, 10);
            for (int t = 0; t < cfg.t_pred; ++t)
                if (target2.mask.at(a, t) == 0.0)
                    for (int c = 0; c < 5; ++c) target2.features.at(a, t, c) = rng.uniform(-10, 10);
        }
        auto [pert_loss, pert_grads] = grads_of(obs2, target2);
        REQUIRE(std::abs(base_loss - pert_loss) < 1e-12);
        for (const auto& name : all.names()) {
            const Tensor& a = base_grads.at(name);
            const Tensor& b = pert_grads.at(name);
            for (std::int64_t i = 0; i < a.size(); ++i) REQUIRE(std::abs(a[i] - b[i]) < 1e-12);
        }
    }

    SECTION("learnable weight gradient matches 1 - L * exp(-s)") {
        Rng rng(14);
        for (int trial = 0; trial < 20; ++trial) {
            IatcnnConfig cfg = tiny_config();
            IatcnnModel model(cfg, 200 + trial);
            ObservationBatch obs = random_obs(cfg, rng);
            TargetBatch target = random_target(cfg, rng, obs);
            ParamStore all = with_loss_weights(model, rng.uniform(-0.5, 0.5));

            Graph g;
            BoundParams bp(g, all);
            auto go = model.build_graph(g, bp, obs);
            auto terms = model.build_loss_terms(g, go, target);
            Var loss = IatcnnModel::combine_loss(g, terms, bp("loss.s_p"), bp("loss.s_gamma"),
                                                 bp("loss.s_mask"));
            g.backward(loss);

            const double sp = all.get("loss.s_p")[0];
            const double sg = all.get("loss.s_gamma")[0];
            const double sm = all.get("loss.s_mask")[0];
            REQUIRE(g.grad(bp("loss.s_p").id)[0] ==
                    Catch::Approx(1.0 - terms.position.value()[0] * std::exp(-sp)).margin(1e-8));
            REQUIRE(g.grad(bp("loss.s_gamma").id)[0] ==
                    Catch::Approx(1.0 - terms.rotation.value()[0] * std::exp(-sg)).margin(1e-8));
            REQUIRE(g.grad(bp("loss.s_mask").id)[0] ==
                    Catch::Approx(1.0 - terms.mask.value()[0] * std::exp(-sm)).margin(1e-8));
        }
    }
}

TEST_CASE("full-model finite differences") {
    Rng rng(15);
    for (int variant = 0; variant < 3; ++variant) {
        IatcnnConfig cfg = tiny_config(static_cast<IatcnnConfig::Variant>(variant));
        cfg.filters = {3, 3, 3};
        cfg.kernel_size = 2;
        IatcnnModel model(cfg, 70 + variant);
        ObservationBatch obs = random_obs(cfg, rng);
        TargetBatch target = random_target(cfg, rng, obs);
        ParamStore all = with_loss_weights(model, 0.2);
        // jitter every parameter so no ReLU input sits exactly on its kink,
        // where a subgradient and a finite difference legitimately disagree
        for (const auto& name : all.names()) {
            Tensor& t = all.get(name);
            for (std::int64_t i = 0; i < t.size(); ++i) t[i] += rng.uniform(0.01, 0.05);
        }

        Graph g;
        BoundParams bp(g, all);
        auto go = model.build_graph(g, bp, obs);
        auto terms = model.build_loss_terms(g, go, target);
        Var loss =
            IatcnnModel::combine_loss(g, terms, bp("loss.s_p"), bp("loss.s_gamma"), bp("loss.s_mask"));
        g.backward(loss);
        GradMap grads = collect_grads(g, bp, all);

        std::vector<Tensor*> inputs;
        std::vector<const Tensor*> analytic;
        std::vector<std::string> labels;
        for (const auto& name : all.names()) {
            inputs.push_back(&all.get(name));
            analytic.push_back(&grads.at(name));
            labels.push_back(name);
        }
        auto forward = [&]() { return loss_forward(model, all, obs, target); };
        auto res = check_gradients(forward, inputs, analytic, {}, labels);
        INFO("variant " << variant << " worst: " << res.worst);
        REQUIRE(res.ok);
        REQUIRE(res.max_rel_err < 1e-4);
    }
}

TEST_CASE("point decoding") {
    PredictionBatch pred;
    pred.n = 1;
    pred.t_pred = 3;
    pred.mask_logits = Tensor::zeros({1, 3});
    pred.pred_mask = Tensor::zeros({1, 3});
    GaussianParams gp;
    gp.mu_x = 1;
    gp.mu_y = 2;
    gp.mu_v = 0.5;
    pred.gaussians.assign(3, gp);
    pred.quats = {{1.0, 0.0}, {std::sqrt(0.5), std::sqrt(0.5)}, {0.0, 1.0}};
    auto points = predict_points(pred);
    REQUIRE(points[0][0].yaw_deg == Catch::Approx(0.0).margin(1e-12));
    REQUIRE(points[0][1].yaw_deg == Catch::Approx(90.0).margin(1e-9));
    REQUIRE(points[0][2].yaw_deg == Catch::Approx(180.0).margin(1e-9));
    REQUIRE(points[0][0].x == 1.0);
    REQUIRE(points[0][0].v == 0.5);
}

TEST_CASE("training on synthetic data") {
    SECTION("overfits a single constant-velocity agent") {
        // one straight track; the model should learn to extrapolate it
        Scene scene = gen_constant_velocity(1, 20, 1.0, 1.0, 77);
        WindowSpec spec;
        spec.t_obs = 8;
        spec.t_pred = 12;
        spec.stride = 20;
        spec.n_max = 2;
        auto windows = window_scene(scene, spec);
        REQUIRE(windows.size() == 1);

        IatcnnConfig cfg;
        cfg.kernel_size = 8;
        cfg.filters = {32, 32, 32};
        cfg.input_scale = 0.25;
        cfg.t_obs = 8;
        cfg.t_pred = 12;
        cfg.n_max = 2;
        IatcnnModel model(cfg, 21);
        // 200 optimizer steps total: a coarse phase and a fine phase
        MpTrainConfig tc;
        tc.lr = 1e-2;
        tc.epochs = 150;  // one window per epoch -> one step per epoch
        tc.batch_size = 1;
        tc.seed = 3;
        auto r1 = train_iatcnn(model, windows, tc);
        tc.lr = 5e-4;
        tc.epochs = 50;
        auto r2 = train_iatcnn(model, windows, tc);
        REQUIRE(r1.epoch_loss.size() + r2.epoch_loss.size() == 200);

        auto pred = model.forward(windows[0].obs);
        const double err = ade(predict_points(pred), windows[0].target);
        INFO("final ADE " << err);
        REQUIRE(err < 0.05);
    }
    SECTION("seed determinism of the loss history") {
        Scene scene = gen_social_forces(3, 20, SFParams{}, 123);
        WindowSpec spec;
        spec.t_obs = 4;
        spec.t_pred = 6;
        spec.stride = 10;
        spec.n_max = 3;
        auto windows = window_scene(scene, spec);
        REQUIRE_FALSE(windows.empty());

        IatcnnConfig cfg = tiny_config();
        cfg.t_obs = 4;
        cfg.t_pred = 6;
        cfg.n_max = 3;
        auto run = [&]() {
            IatcnnModel model(cfg, 31);
            MpTrainConfig tc;
            tc.epochs = 3;
            tc.batch_size = 2;
            tc.seed = 9;
            return train_iatcnn(model, windows, tc).epoch_loss;
        };
        auto a = run(), b = run();
        REQUIRE(a == b);
    }
    SECTION("empty dataset rejected") {
        IatcnnModel model(tiny_config(), 1);
        REQUIRE_THROWS_AS(train_iatcnn(model, {}, MpTrainConfig{}), std::invalid_argument);
    }
}
