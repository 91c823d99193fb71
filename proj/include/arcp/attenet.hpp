#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "arcp/graph.hpp"
#include "arcp/metrics.hpp"
#include "arcp/netpbm.hpp"
#include "arcp/ops.hpp"
#include "arcp/optim.hpp"
#include "arcp/params.hpp"
#include "arcp/rng.hpp"
#include "arcp/tensor.hpp"

namespace arcp {

// Toy-scale AtteNet: five stages of pre-activation bottleneck residual units
// with ELU activations, a squeeze-excitation block (1x1 convolutions) at the
// end of every stage, then global average pooling, dropout and a linear
// classifier head. Structure follows the full-scale network; widths and
// depths are configurable and default to desk-trainable values.
struct AtteNetConfig {
    std::vector<int> stage_widths = {16, 32, 64, 128, 256};
    std::vector<int> units_per_stage = {1, 1, 1, 1, 1};
    std::vector<int> stage_strides = {1, 2, 2, 2, 2};
    int se_reduction = 4;
    int num_classes = 4;
    int input_size = 32;
    double dropout_p = 0.2;

    void validate() const {
        if (stage_widths.size() != 5) throw std::invalid_argument("AtteNetConfig: exactly 5 stages");
        if (units_per_stage.size() != 5 || stage_strides.size() != 5)
            throw std::invalid_argument("AtteNetConfig: per-stage fields need 5 entries");
        for (int w : stage_widths) {
            if (w < 4 || w % 4 != 0)
                throw std::invalid_argument("AtteNetConfig: stage widths must be multiples of 4");
            if (w % se_reduction != 0)
                throw std::invalid_argument("AtteNetConfig: SE reduction must divide every stage width");
        }
        for (int u : units_per_stage)
            if (u < 1) throw std::invalid_argument("AtteNetConfig: units_per_stage must be >= 1");
        for (int s : stage_strides)
            if (s != 1 && s != 2) throw std::invalid_argument("AtteNetConfig: strides must be 1 or 2");
        if (num_classes < 2) throw std::invalid_argument("AtteNetConfig: need at least 2 classes");
        if (input_size < 4) throw std::invalid_argument("AtteNetConfig: input size too small");
        if (dropout_p < 0.0 || dropout_p >= 1.0)
            throw std::invalid_argument("AtteNetConfig: dropout_p must be in [0, 1)");
    }

    // spatial size of the stage-5 output feature map; strides are applied by
    // 3x3/pad-1 convolutions, so each stage maps size -> ceil(size / stride)
    int feature_map_size() const {
        int s = input_size;
        for (int st : stage_strides) s = (s + st - 1) / st;
        return s;
    }
};

class AtteNetModel {
public:
    AtteNetModel(AtteNetConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
        cfg_.validate();
        Rng rng(seed);
        add_conv("stem", 3, cfg_.stage_widths[0], 3, rng);
        int cin = cfg_.stage_widths[0];
        for (int s = 0; s < 5; ++s) {
            const int w = cfg_.stage_widths[static_cast<std::size_t>(s)];
            const int mid = w / 4;
            for (int u = 0; u < cfg_.units_per_stage[static_cast<std::size_t>(s)]; ++u) {
                const std::string prefix = unit_name(s, u);
                const int unit_in = u == 0 ? cin : w;
                const int stride = u == 0 ? cfg_.stage_strides[static_cast<std::size_t>(s)] : 1;
                add_bn(prefix + ".bn0", unit_in);
                add_conv(prefix + ".conv1", unit_in, mid, 1, rng);
                add_bn(prefix + ".bn1", mid);
                add_conv(prefix + ".conv2", mid, mid, 3, rng);
                add_bn(prefix + ".bn2", mid);
                add_conv(prefix + ".conv3", mid, w, 1, rng);
                if (unit_in != w || stride != 1) add_conv(prefix + ".proj", unit_in, w, 1, rng);
            }
            const std::string se = stage_name(s) + ".se";
            add_conv(se + ".reduce", w, w / cfg_.se_reduction, 1, rng);
            add_conv(se + ".expand", w / cfg_.se_reduction, w, 1, rng);
            cin = w;
        }
        params_.add("head.weight", glorot_uniform({cfg_.num_classes, cin}, cin, cfg_.num_classes, rng));
        params_.add("head.bias", Tensor::zeros({cfg_.num_classes}));
    }

    const AtteNetConfig& config() const { return cfg_; }
    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }
    std::map<std::string, BatchNormState>& bn_states() { return bn_states_; }
    const std::map<std::string, BatchNormState>& bn_states() const { return bn_states_; }
    std::int64_t parameter_count() const { return params_.total_size(); }

    static std::string stage_name(int s) { return "stage" + std::to_string(s + 1); }
    static std::string unit_name(int s, int u) {
        return stage_name(s) + ".unit" + std::to_string(u + 1);
    }

    struct GraphOut {
        Var logits;  // [num_classes]
        Var res5;    // stage-5 feature map [C x H x W]
    };

    // One differentiable pass over a minibatch of [3 x S x S] images.
    // Batchnorm statistics span the whole batch in Train mode (and update
    // the running stats); Infer mode applies the frozen statistics, making
    // each image's output independent of the rest of the batch.
    std::vector<GraphOut> build_batch_graph(Graph& g, const BoundParams& p,
                                            const std::vector<Tensor>& images, Mode mode,
                                            Rng* dropout_rng = nullptr) const {
        if (images.empty()) throw std::invalid_argument("AtteNet: empty batch");
        for (const Tensor& image : images)
            if (image.ndim() != 3 || image.dim(0) != 3 || image.dim(1) != cfg_.input_size ||
                image.dim(2) != cfg_.input_size)
                throw std::invalid_argument(
                    "AtteNet: image must be [3 x " + std::to_string(cfg_.input_size) + " x " +
                    std::to_string(cfg_.input_size) + "], got " + shape_to_string(image.shape()));
        if (mode == Mode::Train && cfg_.dropout_p > 0.0 && dropout_rng == nullptr)
            throw std::invalid_argument("AtteNet: train mode needs a dropout rng");

        std::vector<Var> hs;
        hs.reserve(images.size());
        for (const Tensor& image : images)
            hs.push_back(ops::conv2d(g.constant(image), p("stem.weight"), p("stem.bias"), 1, 1));
        int cin = cfg_.stage_widths[0];
        for (int s = 0; s < 5; ++s) {
            const int w = cfg_.stage_widths[static_cast<std::size_t>(s)];
            for (int u = 0; u < cfg_.units_per_stage[static_cast<std::size_t>(s)]; ++u) {
                const int unit_in = u == 0 ? cin : w;
                const int stride = u == 0 ? cfg_.stage_strides[static_cast<std::size_t>(s)] : 1;
                hs = preact_unit_batch(g, p, unit_name(s, u), hs, unit_in, w, stride, mode);
            }
            for (Var& h : hs) h = se_block(g, p, stage_name(s) + ".se", h);
            cin = w;
        }
        std::vector<GraphOut> outs;
        outs.reserve(hs.size());
        for (Var& h : hs) {
            GraphOut out;
            out.res5 = h;
            Var pooled = ops::global_avg_pool(h);
            if (mode == Mode::Train && cfg_.dropout_p > 0.0)
                pooled = ops::dropout(pooled, cfg_.dropout_p, *dropout_rng, mode);
            out.logits = ops::dense(pooled, p("head.weight"), p("head.bias"));
            outs.push_back(out);
        }
        return outs;
    }

    GraphOut build_graph(Graph& g, const BoundParams& p, const Tensor& image, Mode mode,
                         Rng* dropout_rng = nullptr) const {
        return build_batch_graph(g, p, {image}, mode, dropout_rng)[0];
    }

    // Pre-activation bottleneck: BN-ELU before each convolution, 1x1 -> 3x3
    // (carries the stride) -> 1x1, identity or 1x1-projection skip.
    std::vector<Var> preact_unit_batch(Graph& g, const BoundParams& p, const std::string& prefix,
                                       const std::vector<Var>& xs, int unit_in, int w, int stride,
                                       Mode mode) const {
        std::vector<Var> hs = bn_elu_batch(g, p, prefix + ".bn0", xs, mode);
        for (Var& h : hs) h = ops::conv2d(h, p(prefix + ".conv1.weight"), p(prefix + ".conv1.bias"), 1, 0);
        hs = bn_elu_batch(g, p, prefix + ".bn1", hs, mode);
        for (Var& h : hs)
            h = ops::conv2d(h, p(prefix + ".conv2.weight"), p(prefix + ".conv2.bias"), stride, 1);
        hs = bn_elu_batch(g, p, prefix + ".bn2", hs, mode);
        for (Var& h : hs) h = ops::conv2d(h, p(prefix + ".conv3.weight"), p(prefix + ".conv3.bias"), 1, 0);
        for (std::size_t b = 0; b < hs.size(); ++b) {
            Var skip = xs[b];
            if (unit_in != w || stride != 1)
                skip = ops::conv2d(xs[b], p(prefix + ".proj.weight"), p(prefix + ".proj.bias"), stride, 0);
            hs[b] = ops::add(skip, hs[b]);
        }
        return hs;
    }

    Var preact_unit(Graph& g, const BoundParams& p, const std::string& prefix, Var x, int unit_in,
                    int w, int stride, Mode mode) const {
        return preact_unit_batch(g, p, prefix, {x}, unit_in, w, stride, mode)[0];
    }

    // Squeeze (spatial mean) then excitation gates via two 1x1 convolutions.
    static Var se_block(Graph& g, const BoundParams& p, const std::string& prefix, Var x) {
        const int c = x.value().dim(0);
        Var z = ops::reshape(ops::global_avg_pool(x), {c, 1, 1});
        Var a = ops::elu(ops::conv2d(z, p(prefix + ".reduce.weight"), p(prefix + ".reduce.bias"), 1, 0));
        Var gates = ops::sigmoid(
            ops::conv2d(a, p(prefix + ".expand.weight"), p(prefix + ".expand.bias"), 1, 0));
        return ops::scale_channels(x, ops::reshape(gates, {c}));
    }

    // Skip-only reference: stem, per-unit skip paths, SE blocks and the head,
    // with every residual branch absent. The full network must match this
    // bit-exactly once its residual-branch convolutions are zeroed.
    GraphOut build_skip_only_graph(Graph& g, const BoundParams& p, const Tensor& image,
                                   Mode mode) const {
        Var h = ops::conv2d(g.constant(image), p("stem.weight"), p("stem.bias"), 1, 1);
        int cin = cfg_.stage_widths[0];
        for (int s = 0; s < 5; ++s) {
            const int w = cfg_.stage_widths[static_cast<std::size_t>(s)];
            for (int u = 0; u < cfg_.units_per_stage[static_cast<std::size_t>(s)]; ++u) {
                const int unit_in = u == 0 ? cin : w;
                const int stride = u == 0 ? cfg_.stage_strides[static_cast<std::size_t>(s)] : 1;
                const std::string prefix = unit_name(s, u);
                if (unit_in != w || stride != 1)
                    h = ops::conv2d(h, p(prefix + ".proj.weight"), p(prefix + ".proj.bias"), stride, 0);
            }
            h = se_block(g, p, stage_name(s) + ".se", h);
            cin = w;
        }
        GraphOut out;
        out.res5 = h;
        out.logits = ops::dense(ops::global_avg_pool(h), p("head.weight"), p("head.bias"));
        return out;
    }

    // Class probabilities for a center-cropped / correctly sized image.
    std::vector<double> forward_classify(const Tensor& image) const {
        Graph g;
        BoundParams p = BoundParams::frozen(g, params_);
        GraphOut out = build_graph(g, p, image, Mode::Infer, nullptr);
        const Tensor& lv = out.logits.value();
        return softmax(std::vector<double>(lv.data(), lv.data() + lv.size()));
    }

    // Stage-5 feature map at inference, for the fusion head.
    Tensor forward_features(const Tensor& image) const {
        Graph g;
        BoundParams p = BoundParams::frozen(g, params_);
        return build_graph(g, p, image, Mode::Infer, nullptr).res5.value();
    }

private:
    // BN + ELU across the batch: one statistics pass over all images in
    // Train mode; Infer mode is a per-image affine map.
    std::vector<Var> bn_elu_batch(Graph& g, const BoundParams& p, const std::string& name,
                                  const std::vector<Var>& xs, Mode mode) const {
        auto it = bn_states_.find(name);
        if (it == bn_states_.end()) throw std::logic_error("AtteNet: missing bn state " + name);
        Var stacked = ops::stack_batch(xs);
        Var normed =
            ops::batchnorm_batched(stacked, p(name + ".gamma"), p(name + ".beta"), it->second, mode);
        Var act = ops::elu(normed);
        std::vector<Var> out;
        out.reserve(xs.size());
        for (std::size_t b = 0; b < xs.size(); ++b)
            out.push_back(ops::unstack_batch(act, static_cast<int>(b)));
        return out;
    }

    void add_conv(const std::string& name, int cin, int cout, int k, Rng& rng) {
        params_.add(name + ".weight", glorot_uniform({cout, cin, k, k}, cin * k * k, cout * k * k, rng));
        params_.add(name + ".bias", Tensor::zeros({cout}));
    }

    void add_bn(const std::string& name, int channels) {
        params_.add(name + ".gamma", Tensor::full({channels}, 1.0));
        params_.add(name + ".beta", Tensor::zeros({channels}));
        bn_states_.emplace(name, BatchNormState(channels));
    }

    AtteNetConfig cfg_;
    ParamStore params_;
    mutable std::map<std::string, BatchNormState> bn_states_;
};

// ----- crops -----------------------------------------------------------------

inline Tensor crop_image(const Tensor& image, int out_size, int off_y, int off_x) {
    if (image.ndim() != 3) throw std::invalid_argument("crop_image: image must be [C x H x W]");
    if (off_y < 0 || off_x < 0 || off_y + out_size > image.dim(1) || off_x + out_size > image.dim(2))
        throw std::invalid_argument("crop_image: crop window out of bounds");
    Tensor out({image.dim(0), out_size, out_size});
    for (int c = 0; c < image.dim(0); ++c)
        for (int y = 0; y < out_size; ++y)
            for (int x = 0; x < out_size; ++x) out.at(c, y, x) = image.at(c, off_y + y, off_x + x);
    return out;
}

inline Tensor random_crop(const Tensor& image, int out_size, Rng& rng) {
    const int max_y = image.dim(1) - out_size;
    const int max_x = image.dim(2) - out_size;
    if (max_y < 0 || max_x < 0) throw std::invalid_argument("random_crop: image smaller than crop");
    return crop_image(image, out_size, rng.uniform_int(0, max_y), rng.uniform_int(0, max_x));
}

inline Tensor center_crop(const Tensor& image, int out_size) {
    const int off_y = (image.dim(1) - out_size) / 2;
    const int off_x = (image.dim(2) - out_size) / 2;
    return crop_image(image, out_size, off_y, off_x);
}

// ----- training / evaluation ---------------------------------------------------

struct TlTrainConfig {
    double lr = 4e-3;
    double momentum = 0.9;
    double poly_end_lr = 2e-4;  // polynomial decay target
    double poly_power = 1.0;
    int epochs = 100;
    int batch_size = 32;
    double clip_norm = 10.0;
    std::uint64_t seed = 1;
};

struct TlTrainResult {
    std::vector<double> epoch_loss;
};

// SGD with momentum and polynomial learning-rate decay, softmax cross
// entropy, random crops at train time. Dataset images must be stored at
// (input_size + 8) pixels per side.
inline TlTrainResult train_classifier(AtteNetModel& model, const ImageDataset& dataset,
                                      const TlTrainConfig& cfg) {
    if (dataset.empty()) throw std::invalid_argument("train_classifier: empty dataset");
    const int crop = model.config().input_size;
    for (const auto& item : dataset)
        if (item.label < 0 || item.label >= model.config().num_classes)
            throw std::invalid_argument("train_classifier: label out of range");

    const std::int64_t steps_per_epoch =
        (static_cast<std::int64_t>(dataset.size()) + cfg.batch_size - 1) / cfg.batch_size;
    PolyDecay decay{cfg.poly_end_lr, steps_per_epoch * cfg.epochs, cfg.poly_power};
    Optimizer opt = Optimizer::sgd_momentum(cfg.lr, cfg.momentum, decay);
    Rng rng(cfg.seed);

    std::vector<std::size_t> order(dataset.size());
    std::iota(order.begin(), order.end(), 0);

    TlTrainResult result;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(order);
        double epoch_sum = 0.0;
        std::int64_t seen = 0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
            Graph g;
            BoundParams bp(g, model.params());
            std::vector<Tensor> images;
            std::vector<int> labels;
            for (std::size_t k = start; k < end; ++k) {
                const LabeledImage& item = dataset[order[k]];
                images.push_back(random_crop(item.pixels, crop, rng));
                labels.push_back(item.label);
            }
            auto outs = model.build_batch_graph(g, bp, images, Mode::Train, &rng);
            Var loss;
            for (std::size_t k = 0; k < outs.size(); ++k) {
                Var ce = ops::softmax_cross_entropy(outs[k].logits, labels[k]);
                loss = k == 0 ? ce : ops::add(loss, ce);
            }
            loss = ops::mul_scalar(loss, 1.0 / static_cast<double>(end - start));
            g.backward(loss);
            GradMap grads = collect_grads(g, bp, model.params());
            clip_global_norm(grads, cfg.clip_norm);
            opt.step(model.params(), grads);
            epoch_sum += loss.value()[0] * static_cast<double>(end - start);
            seen += static_cast<std::int64_t>(end - start);
        }
        result.epoch_loss.push_back(epoch_sum / static_cast<double>(seen));
    }
    return result;
}

// Center-crop evaluation; returns accuracy, per-class precision/recall and
// the confusion matrix (rows predictions, columns groundtruth).
inline ClassificationReport eval_classifier(const AtteNetModel& model, const ImageDataset& dataset) {
    if (dataset.empty()) throw std::invalid_argument("eval_classifier: empty dataset");
    const int crop = model.config().input_size;
    std::vector<int> pred, gt;
    pred.reserve(dataset.size());
    gt.reserve(dataset.size());
    for (const auto& item : dataset) {
        Tensor img = item.pixels.dim(1) == crop && item.pixels.dim(2) == crop
                         ? item.pixels
                         : center_crop(item.pixels, crop);
        auto probs = model.forward_classify(img);
        pred.push_back(static_cast<int>(std::max_element(probs.begin(), probs.end()) - probs.begin()));
        gt.push_back(item.label);
    }
    return classification_report(pred, gt, model.config().num_classes);
}

// Per-class scores for precision-recall curves: P(class c) per sample.
inline std::vector<double> class_scores(const AtteNetModel& model, const ImageDataset& dataset,
                                        int cls) {
    const int crop = model.config().input_size;
    std::vector<double> scores;
    scores.reserve(dataset.size());
    for (const auto& item : dataset) {
        Tensor img = item.pixels.dim(1) == crop && item.pixels.dim(2) == crop
                         ? item.pixels
                         : center_crop(item.pixels, crop);
        scores.push_back(model.forward_classify(img)[static_cast<std::size_t>(cls)]);
    }
    return scores;
}

}  // namespace arcp
