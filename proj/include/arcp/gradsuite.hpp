#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "arcp/attenet.hpp"
#include "arcp/fusion.hpp"
#include "arcp/gradcheck.hpp"
#include "arcp/graph.hpp"
#include "arcp/iatcnn.hpp"
#include "arcp/ops.hpp"
#include "arcp/params.hpp"
#include "arcp/rng.hpp"

namespace arcp {

// Central finite-difference audit of every differentiable operation and of
// the full models at toy scale. Inputs for kinked activations (relu) are
// drawn away from the kink, where a subgradient and a finite difference
// legitimately disagree.
struct GradSuiteItem {
    std::string name;
    int cases = 0;
    bool ok = true;
    double worst_rel = 0.0;
    std::string note;
};

struct GradSuiteResult {
    std::vector<GradSuiteItem> items;
    bool all_ok = true;

    void add(GradSuiteItem item) {
        all_ok = all_ok && item.ok;
        items.push_back(std::move(item));
    }
};

namespace gradsuite_detail {

inline Tensor rand_tensor(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor t(std::move(s));
    rng.fill_uniform(t, lo, hi);
    return t;
}

// Weighted-sum loss over an op output; forward rebuilt per probe.
template <typename Build>
GradSuiteItem check_op(const std::string& name, int cases, Rng& rng, Build make_case) {
    GradSuiteItem item;
    item.name = name;
    item.cases = cases;
    for (int k = 0; k < cases; ++k) {
        // make_case fills inputs and returns a builder closure
        std::vector<Tensor> inputs;
        auto build = make_case(rng, inputs);

        Tensor w;
        auto forward = [&]() -> double {
            Graph g;
            std::vector<Var> vars;
            vars.reserve(inputs.size());
            for (auto& t : inputs) vars.push_back(g.leaf(t));
            Var y = build(g, vars);
            if (w.empty()) {
                w = Tensor(y.value().shape());
                Rng wr(rng.fork(1234 + static_cast<std::uint64_t>(k)).next_u64());
                wr.fill_uniform(w, -1.0, 1.0);
            }
            Var wv = g.constant(w);
            return ops::sum(ops::mul(y, wv)).value()[0];
        };

        Graph g;
        std::vector<Var> vars;
        for (auto& t : inputs) vars.push_back(g.leaf(t));
        Var y = build(g, vars);
        if (w.empty()) {
            w = Tensor(y.value().shape());
            Rng wr(rng.fork(1234 + static_cast<std::uint64_t>(k)).next_u64());
            wr.fill_uniform(w, -1.0, 1.0);
        }
        Var loss = ops::sum(ops::mul(y, g.constant(w)));
        g.backward(loss);

        std::vector<Tensor> grads;
        for (std::size_t i = 0; i < inputs.size(); ++i)
            grads.push_back(g.has_grad(vars[i].id) ? g.node(vars[i].id).grad
                                                   : Tensor::zeros(inputs[i].shape()));
        std::vector<Tensor*> iptr;
        std::vector<const Tensor*> gptr;
        for (std::size_t i = 0; i < inputs.size(); ++i) {
            iptr.push_back(&inputs[i]);
            gptr.push_back(&grads[i]);
        }
        auto res = check_gradients(forward, iptr, gptr);
        item.worst_rel = std::max(item.worst_rel, res.max_rel_err);
        if (!res.ok) {
            item.ok = false;
            if (item.note.empty()) item.note = "case " + std::to_string(k) + ": " + res.worst;
        }
    }
    return item;
}

}  // namespace gradsuite_detail

inline GradSuiteResult run_op_gradient_suite(int cases_per_op, std::uint64_t seed) {
    using namespace gradsuite_detail;
    GradSuiteResult suite;
    Rng rng(seed);

    auto binary = [&suite, cases_per_op](const std::string& name, Rng& r, auto opfn, double lo_b = -1.0,
                                         double hi_b = 1.0) {
        suite.add(check_op(name, cases_per_op, r, [opfn, lo_b, hi_b](Rng& rr, std::vector<Tensor>& in) {
            const int a = rr.uniform_int(2, 4), b = rr.uniform_int(2, 4);
            in.push_back(rand_tensor({a, b}, rr));
            in.push_back(rand_tensor({a, b}, rr, lo_b, hi_b));
            return [opfn](Graph&, std::vector<Var>& v) { return opfn(v[0], v[1]); };
        }));
    };
    binary("add", rng, [](Var a, Var b) { return ops::add(a, b); });
    binary("sub", rng, [](Var a, Var b) { return ops::sub(a, b); });
    binary("mul", rng, [](Var a, Var b) { return ops::mul(a, b); });
    binary("div", rng, [](Var a, Var b) { return ops::div(a, b); }, 0.4, 2.0);
    binary("hypot2", rng, [](Var a, Var b) { return ops::hypot2(a, b); }, 0.3, 2.0);

    auto unary = [&suite, cases_per_op](const std::string& name, Rng& r, auto opfn, double lo = -1.5,
                                        double hi = 1.5) {
        suite.add(check_op(name, cases_per_op, r, [opfn, lo, hi](Rng& rr, std::vector<Tensor>& in) {
            const int a = rr.uniform_int(2, 4), b = rr.uniform_int(2, 4);
            in.push_back(rand_tensor({a, b}, rr, lo, hi));
            return [opfn](Graph&, std::vector<Var>& v) { return opfn(v[0]); };
        }));
    };
    unary("tanh", rng, [](Var x) { return ops::tanh(x); });
    unary("elu", rng, [](Var x) { return ops::elu(x); });
    unary("sigmoid", rng, [](Var x) { return ops::sigmoid(x); });
    unary("exp", rng, [](Var x) { return ops::exp(x); });
    unary("log", rng, [](Var x) { return ops::log(x); }, 0.2, 3.0);
    unary("sqrt", rng, [](Var x) { return ops::sqrt(x); }, 0.2, 3.0);
    unary("square", rng, [](Var x) { return ops::square(x); });
    // relu probed away from its kink
    suite.add(check_op("relu", cases_per_op, rng, [](Rng& rr, std::vector<Tensor>& in) {
        const int a = rr.uniform_int(2, 4), b = rr.uniform_int(2, 4);
        Tensor t({a, b});
        for (std::int64_t i = 0; i < t.size(); ++i)
            t[i] = (rr.bernoulli(0.5) ? 1.0 : -1.0) * rr.uniform(0.05, 2.0);
        in.push_back(std::move(t));
        return [](Graph&, std::vector<Var>& v) { return ops::relu(v[0]); };
    }));
    suite.add(check_op("add_scalar", cases_per_op, rng, [](Rng& rr, std::vector<Tensor>& in) {
        in.push_back(rand_tensor({3, 3}, rr));
        const double c = rr.uniform(-2, 2);
        return [c](Graph&, std::vector<Var>& v) { return ops::add_scalar(v[0], c); };
    }));
    suite.add(check_op("mul_scalar", cases_per_op, rng, [](Rng& rr, std::vector<Tensor>& in) {
        in.push_back(rand_tensor({3, 3}, rr));
        const double c = rr.uniform(-2, 2);
        return [c](Graph&, std::vector<Var>& v) { return ops::mul_scalar(v[0], c); };
    }));

    suite.add(check_op("dense", cases_per_op, rng, [](Rng& rr, std::vector<Tensor>& in) {
        const int cin = rr.uniform_int(1, 4), cout = rr.uniform_int(1, 4), t = rr.uniform_int(1, 5);
        in.push_back(rand_tensor({cin, t}, rr));
        in.push_back(rand_tensor({cout, cin}, rr));
        in.push_back(rand_tensor({cout}, rr));
        return [](Graph&, std::vector<Var>& v) { return ops::dense(v[0], v[1], v[2]); };
    }));
    suite.add(check_op("causal_conv1d", cases_per_op, rng, [](Rng& rr, std::vector<Tensor>& in) {
        const int cin = rr.uniform_int(1, 3), cout = rr.uniform_int(1, 3);
        const int t = rr.uniform_int(3, 8), k = rr.uniform_int(1, 4), d = rr.uniform_int(1, 3);
        in.push_back(rand_tensor({cin, t}, rr));
        in.push_back(rand_tensor({cout, cin, k}, rr));
        return [d](Graph&, std::vector<Var>& v) { return ops::causal_conv1d(v[0], v[1], d); };
    }));
    suite.add(check_op("conv2d", cases_per_op, rng, [](Rng& rr, std::vector<Tensor>& in) {
        const int cin = rr.uniform_int(1, 3), cout = rr.uniform_int(1, 3);
        const int h = rr.uniform_int(3, 6), w = rr.uniform_int(3, 6);
        const int k = rr.uniform_int(1, 3), s = rr.uniform_int(1, 2), p = rr.uniform_int(0, 1);
        in.push_back(rand_tensor({cin, h, w}, rr));
        in.push_back(rand_tensor({cout, cin, k, k}, rr));
        in.push_back(rand_tensor({cout}, rr));
        return [s, p](Graph&, std::vector<Var>& v) { return ops::conv2d(v[0], v[1], v[2], s, p); };
    }));
    suite.add(check_op("add_rowwise", cases_per_op, rng, [](Rng& rr, std::vector<Tensor>& in) {
        const int a = rr.uniform_int(2, 4), b = rr.uniform_int(2, 4);
        in.push_back(rand_tensor({a, b}, rr));
        in.push_back(rand_tensor({a}, rr));
        return [](Graph&, std::vector<Var>& v) { return ops::add_rowwise(v[0], v[1]); };
    }));
    suite.add(check_op("scale_channels", cases_per_op, rng, [](Rng& rr, std::vector<Tensor>& in) {
        const int a = rr.uniform_int(2, 4), b = rr.uniform_int(2, 4);
        in.push_back(rand_tensor({a, b}, rr));
        in.push_back(rand_tensor({a}, rr));
        return [](Graph&, std::vector<Var>& v) { return ops::scale_channels(v[0], v[1]); };
    }));
    suite.add(check_op("global_avg_pool", cases_per_op, rng, [](Rng& rr, std::vector<Tensor>& in) {
        in.push_back(rand_tensor({rr.uniform_int(1, 4), rr.uniform_int(1, 3), rr.uniform_int(1, 3)}, rr));
        return [](Graph&, std::vector<Var>& v) { return ops::global_avg_pool(v[0]); };
    }));
    suite.add(check_op("sum", cases_per_op, rng, [](Rng& rr, std::vector<Tensor>& in) {
        in.push_back(rand_tensor({rr.uniform_int(1, 4), rr.uniform_int(1, 4)}, rr));
        return [](Graph&, std::vector<Var>& v) { return ops::sum(v[0]); };
    }));
    suite.add(check_op("mean", cases_per_op, rng, [](Rng& rr, std::vector<Tensor>& in) {
        in.push_back(rand_tensor({rr.uniform_int(1, 4), rr.uniform_int(1, 4)}, rr));
        return [](Graph&, std::vector<Var>& v) { return ops::mean(v[0]); };
    }));
    suite.add(check_op("reshape", cases_per_op, rng, [](Rng& rr, std::vector<Tensor>& in) {
        const int a = rr.uniform_int(2, 4), b = rr.uniform_int(2, 4);
        in.push_back(rand_tensor({a, b}, rr));
        return [a, b](Graph&, std::vector<Var>& v) { return ops::reshape(v[0], {b, a}); };
    }));
    suite.add(check_op("transpose2d", cases_per_op, rng, [](Rng& rr, std::vector<Tensor>& in) {
        in.push_back(rand_tensor({rr.uniform_int(2, 4), rr.uniform_int(2, 4)}, rr));
        return [](Graph&, std::vector<Var>& v) { return ops::transpose2d(v[0]); };
    }));
    suite.add(check_op("concat_rows", cases_per_op, rng, [](Rng& rr, std::vector<Tensor>& in) {
        const int b = rr.uniform_int(2, 4);
        in.push_back(rand_tensor({rr.uniform_int(1, 3), b}, rr));
        in.push_back(rand_tensor({rr.uniform_int(1, 3), b}, rr));
        return [](Graph&, std::vector<Var>& v) { return ops::concat_rows(v[0], v[1]); };
    }));
    suite.add(check_op("slice_rows", cases_per_op, rng, [](Rng& rr, std::vector<Tensor>& in) {
        const int a = rr.uniform_int(2, 5), b = rr.uniform_int(2, 4);
        in.push_back(rand_tensor({a, b}, rr));
        const int r0 = rr.uniform_int(0, a - 1);
        const int r1 = rr.uniform_int(r0 + 1, a);
        return [r0, r1](Graph&, std::vector<Var>& v) { return ops::slice_rows(v[0], r0, r1); };
    }));
    suite.add(check_op("crop_cols", cases_per_op, rng, [](Rng& rr, std::vector<Tensor>& in) {
        const int a = rr.uniform_int(2, 4), b = rr.uniform_int(2, 5);
        in.push_back(rand_tensor({a, b}, rr));
        const int c0 = rr.uniform_int(0, b - 1);
        const int c1 = rr.uniform_int(c0 + 1, b);
        return [c0, c1](Graph&, std::vector<Var>& v) { return ops::crop_cols(v[0], c0, c1); };
    }));
    suite.add(check_op("stack_batch", cases_per_op, rng, [](Rng& rr, std::vector<Tensor>& in) {
        const int a = rr.uniform_int(1, 3), b = rr.uniform_int(2, 4);
        const int n = rr.uniform_int(2, 3);
        for (int i = 0; i < n; ++i) in.push_back(rand_tensor({a, b}, rr));
        return [n](Graph&, std::vector<Var>& v) {
            return ops::stack_batch(std::vector<Var>(v.begin(), v.begin() + n));
        };
    }));

    for (Mode mode : {Mode::Train, Mode::Infer}) {
        const std::string suffix = mode == Mode::Train ? "train" : "infer";
        suite.add(check_op("batchnorm[" + suffix + "]", cases_per_op, rng,
                           [mode](Rng& rr, std::vector<Tensor>& in) {
            const int c = rr.uniform_int(2, 4), n = rr.uniform_int(2, 5);
            in.push_back(rand_tensor({c, n}, rr));
            in.push_back(rand_tensor({c}, rr, 0.5, 1.5));
            in.push_back(rand_tensor({c}, rr));
            BatchNormState st(c);
            Rng sr = rr.fork(7);
            sr.fill_uniform(st.running_mean, -0.5, 0.5);
            sr.fill_uniform(st.running_var, 0.5, 1.5);
            return [st, mode](Graph&, std::vector<Var>& v) {
                BatchNormState scratch = st;
                return ops::batchnorm(v[0], v[1], v[2], scratch, mode);
            };
        }));
        suite.add(check_op("batchnorm_batched[" + suffix + "]", cases_per_op, rng,
                           [mode](Rng& rr, std::vector<Tensor>& in) {
            const int b = rr.uniform_int(2, 3), c = rr.uniform_int(2, 3), n = rr.uniform_int(2, 4);
            in.push_back(rand_tensor({b, c, n}, rr));
            in.push_back(rand_tensor({c}, rr, 0.5, 1.5));
            in.push_back(rand_tensor({c}, rr));
            BatchNormState st(c);
            Rng sr = rr.fork(7);
            sr.fill_uniform(st.running_mean, -0.5, 0.5);
            sr.fill_uniform(st.running_var, 0.5, 1.5);
            return [st, mode](Graph&, std::vector<Var>& v) {
                BatchNormState scratch = st;
                return ops::batchnorm_batched(v[0], v[1], v[2], scratch, mode);
            };
        }));
    }

    // dropout with a per-case fixed mask seed so probes see the same mask
    suite.add(check_op("dropout[train]", cases_per_op, rng, [](Rng& rr, std::vector<Tensor>& in) {
        in.push_back(rand_tensor({3, 4}, rr));
        const std::uint64_t mask_seed = rr.next_u64();
        const double p = rr.uniform(0.1, 0.6);
        return [mask_seed, p](Graph&, std::vector<Var>& v) {
            Rng dr(mask_seed);
            return ops::dropout(v[0], p, dr, Mode::Train);
        };
    }));

    suite.add(check_op("softmax_cross_entropy", cases_per_op, rng, [](Rng& rr, std::vector<Tensor>& in) {
        const int k = rr.uniform_int(2, 6);
        in.push_back(rand_tensor({k}, rr, -2, 2));
        const int label = rr.uniform_int(0, k - 1);
        return [label](Graph&, std::vector<Var>& v) {
            return ops::softmax_cross_entropy(v[0], label);
        };
    }));
    suite.add(check_op("bce_with_logits", cases_per_op, rng, [](Rng& rr, std::vector<Tensor>& in) {
        const int a = rr.uniform_int(2, 4), b = rr.uniform_int(2, 4);
        in.push_back(rand_tensor({a, b}, rr, -2, 2));
        Tensor targets({a, b});
        Rng tr = rr.fork(5);
        for (std::int64_t i = 0; i < targets.size(); ++i) targets[i] = tr.bernoulli(0.5) ? 1.0 : 0.0;
        return [targets](Graph& g, std::vector<Var>& v) {
            return ops::bce_with_logits(v[0], g.constant(targets));
        };
    }));

    return suite;
}

// Finite differences through an entire model loss against every parameter.
inline GradSuiteItem check_model_gradients(const std::string& name, ParamStore& store,
                                           const std::function<double()>& value_forward,
                                           const std::function<GradMap()>& analytic_backward) {
    GradSuiteItem item;
    item.name = name;
    item.cases = 1;
    GradMap grads = analytic_backward();
    std::vector<Tensor*> inputs;
    std::vector<const Tensor*> analytic;
    std::vector<std::string> labels;
    for (const auto& pname : store.names()) {
        inputs.push_back(&store.get(pname));
        analytic.push_back(&grads.at(pname));
        labels.push_back(pname);
    }
    auto res = check_gradients(value_forward, inputs, analytic, {}, labels);
    item.ok = res.ok;
    item.worst_rel = res.max_rel_err;
    if (!res.ok) item.note = res.worst;
    return item;
}

// Full-model finite-difference checks: the three IA-TCNN variants under the
// trajectory loss, the toy classifier at 8x8, and the learned fusion heads.
inline GradSuiteResult run_model_gradient_suite(int instances, std::uint64_t seed) {
    GradSuiteResult suite;
    Rng top(seed);

    for (int variant = 0; variant < 3; ++variant) {
        for (int inst = 0; inst < instances; ++inst) {
            Rng rng = top.fork(100 + static_cast<std::uint64_t>(variant * 37 + inst));
            IatcnnConfig cfg;
            cfg.variant = static_cast<IatcnnConfig::Variant>(variant);
            cfg.kernel_size = 2;
            cfg.filters = {3, 3, 3};
            cfg.t_obs = 3;
            cfg.t_pred = 4;
            cfg.n_max = 2;
            IatcnnModel model(cfg, rng.next_u64());

            ObservationBatch obs;
            obs.features = Tensor::zeros({cfg.n_max, cfg.t_obs, 5});
            obs.mask = Tensor::zeros({cfg.n_max, cfg.t_obs});
            TargetBatch target;
            target.features = Tensor::zeros({cfg.n_max, cfg.t_pred, 5});
            target.mask = Tensor::zeros({cfg.n_max, cfg.t_pred});
            for (int a = 0; a < cfg.n_max; ++a) {
                bool any = false;
                for (int t = 0; t < cfg.t_obs; ++t)
                    if (rng.uniform() < 0.85) {
                        obs.mask.at(a, t) = 1.0;
                        any = true;
                        for (int c = 0; c < 5; ++c) obs.features.at(a, t, c) = rng.uniform(-2, 2);
                    }
                if (!any) continue;
                for (int t = 0; t < cfg.t_pred; ++t)
                    if (rng.uniform() < 0.85) {
                        target.mask.at(a, t) = 1.0;
                        for (int c = 0; c < 3; ++c) target.features.at(a, t, c) = rng.uniform(-2, 2);
                        const double yaw = rng.uniform(-3, 3);
                        target.features.at(a, t, 3) = std::cos(yaw / 2);
                        target.features.at(a, t, 4) = std::sin(yaw / 2);
                    }
            }

            ParamStore all;
            for (const auto& n : model.params().names()) all.add(n, model.params().get(n));
            all.add("loss.s_p", Tensor::scalar(rng.uniform(-0.3, 0.3)));
            all.add("loss.s_gamma", Tensor::scalar(rng.uniform(-0.3, 0.3)));
            all.add("loss.s_mask", Tensor::scalar(rng.uniform(-0.3, 0.3)));
            for (const auto& n : all.names()) {
                Tensor& t = all.get(n);
                for (std::int64_t i = 0; i < t.size(); ++i) t[i] += rng.uniform(0.01, 0.05);
            }

            auto loss_of = [&](Graph& g, BoundParams& bp) {
                auto go = model.build_graph(g, bp, obs);
                auto terms = model.build_loss_terms(g, go, target);
                return IatcnnModel::combine_loss(g, terms, bp("loss.s_p"), bp("loss.s_gamma"),
                                                 bp("loss.s_mask"));
            };
            auto forward = [&]() -> double {
                Graph g;
                BoundParams bp(g, all);
                return loss_of(g, bp).value()[0];
            };
            auto backward = [&]() {
                Graph g;
                BoundParams bp(g, all);
                Var loss = loss_of(g, bp);
                g.backward(loss);
                return collect_grads(g, bp, all);
            };
            suite.add(check_model_gradients(
                std::string("model:") + iatcnn_variant_name(cfg.variant) + "#" + std::to_string(inst),
                all, forward, backward));
        }
    }

    for (int inst = 0; inst < instances; ++inst) {
        Rng rng = top.fork(500 + static_cast<std::uint64_t>(inst));
        AtteNetConfig cfg;
        cfg.stage_widths = {4, 4, 8, 8, 8};
        cfg.units_per_stage = {1, 1, 1, 1, 1};
        cfg.stage_strides = {1, 2, 2, 2, 1};
        cfg.input_size = 8;
        cfg.dropout_p = 0.0;
        AtteNetModel model(cfg, rng.next_u64());
        for (const auto& n : model.params().names()) {
            Tensor& t = model.params().get(n);
            for (std::int64_t i = 0; i < t.size(); ++i) t[i] += rng.uniform(0.01, 0.03);
        }
        Tensor img({3, 8, 8});
        rng.fill_uniform(img, 0, 1);
        const int label = rng.uniform_int(0, cfg.num_classes - 1);

        auto bn_backup = model.bn_states();
        auto forward = [&]() -> double {
            model.bn_states() = bn_backup;
            Graph g;
            BoundParams bp(g, model.params());
            auto out = model.build_graph(g, bp, img, Mode::Train, nullptr);
            return ops::softmax_cross_entropy(out.logits, label).value()[0];
        };
        auto backward = [&]() {
            model.bn_states() = bn_backup;
            Graph g;
            BoundParams bp(g, model.params());
            auto out = model.build_graph(g, bp, img, Mode::Train, nullptr);
            Var loss = ops::softmax_cross_entropy(out.logits, label);
            g.backward(loss);
            return collect_grads(g, bp, model.params());
        };
        suite.add(check_model_gradients("model:attenet#" + std::to_string(inst), model.params(),
                                        forward, backward));
    }

    for (FusionVariant variant :
         {FusionVariant::ArcpTlrMp, FusionVariant::ArcpMp, FusionVariant::ArcpTlr}) {
        for (int inst = 0; inst < instances; ++inst) {
            Rng rng = top.fork(900 + static_cast<std::uint64_t>(static_cast<int>(variant) * 31 + inst));
            FusionConfig cfg;
            cfg.variant = variant;
            cfg.h = 2;
            cfg.w = 2;
            cfg.c = 4;
            cfg.d = 16;
            cfg.hidden = 8;
            cfg.n_max = 2;
            cfg.t_pred = 3;
            FusionHead head(cfg, rng.next_u64());
            Tensor traj({cfg.traj_width()});
            rng.fill_uniform(traj, -1, 1);
            Tensor feats({cfg.c, cfg.h, cfg.w});
            rng.fill_uniform(feats, -1, 1);
            const int label = rng.uniform_int(0, 1);

            auto loss_of = [&](Graph& g, BoundParams& bp) {
                Var tv = g.constant(traj), fv = g.constant(feats);
                Var logits = head.build_graph(bp, head.uses_trajectories() ? &tv : nullptr,
                                              head.uses_traffic_light() ? &fv : nullptr);
                return ops::softmax_cross_entropy(logits, label);
            };
            auto forward = [&]() -> double {
                Graph g;
                BoundParams bp(g, head.params());
                return loss_of(g, bp).value()[0];
            };
            auto backward = [&]() {
                Graph g;
                BoundParams bp(g, head.params());
                Var loss = loss_of(g, bp);
                g.backward(loss);
                return collect_grads(g, bp, head.params());
            };
            suite.add(check_model_gradients(std::string("model:fusion-") + fusion_variant_name(variant) +
                                                "#" + std::to_string(inst),
                                            head.params(), forward, backward));
        }
    }

    return suite;
}

inline GradSuiteResult run_full_gradient_suite(int cases_per_op = 100, int model_instances = 3,
                                               std::uint64_t seed = 424242) {
    GradSuiteResult ops_suite = run_op_gradient_suite(cases_per_op, seed);
    GradSuiteResult models = run_model_gradient_suite(model_instances, seed + 1);
    for (auto& item : models.items) ops_suite.add(std::move(item));
    return ops_suite;
}

}  // namespace arcp
