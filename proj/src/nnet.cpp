#include "psonet/nnet.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "psonet/errors.hpp"

namespace psonet::nnet {

std::string_view encoder_variant_name(EncoderVariant v) {
    return v == EncoderVariant::TinyConv ? "tiny_conv" : "pluggable_pretrained";
}

EncoderVariant encoder_variant_from_name(std::string_view name) {
    if (name == "tiny_conv") return EncoderVariant::TinyConv;
    if (name == "pluggable_pretrained") return EncoderVariant::PluggablePretrained;
    throw ValidationError("unknown encoder variant '" + std::string(name) + "'");
}

void EncoderConfig::validate() const {
    if (base_width < 1) throw ValidationError("encoder base_width must be >= 1");
    if (input_height % 32 != 0 || input_width % 32 != 0 || input_height <= 0 ||
        input_width <= 0) {
        throw ValidationError("encoder input sides must be positive multiples of 32, got " +
                              std::to_string(input_height) + "x" + std::to_string(input_width));
    }
}

void ModelConfig::validate() const {
    encoder.validate();
    if (embed_dim < 1) throw ValidationError("embed_dim must be >= 1");
    if (attention_hidden < 1) throw ValidationError("attention_hidden must be >= 1");
}

// --- Math kernels -----------------------------------------------------------

namespace {

constexpr double kScoreMin = 0.0;
constexpr double kScoreMax = 72.0;

inline int conv_out_side(int in, int stride) { return (in - 1) / stride + 1; } // pad 1, k 3

// Encoder nonlinearity: ELU. Smooth at 0, which keeps finite-difference
// probes of the conv stack well conditioned, and its derivative reuses the
// cached pre-activation without a second transcendental on the positive half.
inline double elu(double x) { return x > 0.0 ? x : std::expm1(x); }
inline double elu_grad(double x) { return x > 0.0 ? 1.0 : std::exp(x); }

inline double gelu(double x) {
    return 0.5 * x * (1.0 + std::erf(x * 0.7071067811865475244));
}
inline double gelu_grad(double x) {
    const double cdf = 0.5 * (1.0 + std::erf(x * 0.7071067811865475244));
    const double pdf = std::exp(-0.5 * x * x) * 0.3989422804014326779;
    return cdf + x * pdf;
}

// One output row of a stride-2 3x3 convolution for one (ky, input-channel)
// pair; taps w0..w2 are the kernel row. ix = 2*ox - 1 + kx.
inline void accum_row_s2(const double* x, int w, double w0, double w1, double w2, double* y,
                         int ow) {
    double first = w1 * x[0];
    if (w >= 2) first += w2 * x[1];
    y[0] += first;
    const int interior_hi = std::min(ow - 1, (w - 2) / 2);
    for (int ox = 1; ox <= interior_hi; ++ox) {
        const double* p = x + 2 * ox - 1;
        y[ox] += w0 * p[0] + w1 * p[1] + w2 * p[2];
    }
    for (int ox = interior_hi + 1; ox <= ow - 1; ++ox) {
        const int base = 2 * ox - 1;
        double acc = w0 * x[base];
        if (base + 1 < w) acc += w1 * x[base + 1];
        if (base + 2 < w) acc += w2 * x[base + 2];
        y[ox] += acc;
    }
}

// Transpose of accum_row_s2: scatters dy back into dx.
inline void scatter_row_s2(double* dx, int w, double w0, double w1, double w2, const double* dy,
                           int ow) {
    dx[0] += w1 * dy[0];
    if (w >= 2) dx[1] += w2 * dy[0];
    const int interior_hi = std::min(ow - 1, (w - 2) / 2);
    for (int ox = 1; ox <= interior_hi; ++ox) {
        double* p = dx + 2 * ox - 1;
        const double g = dy[ox];
        p[0] += w0 * g;
        p[1] += w1 * g;
        p[2] += w2 * g;
    }
    for (int ox = interior_hi + 1; ox <= ow - 1; ++ox) {
        const int base = 2 * ox - 1;
        const double g = dy[ox];
        dx[base] += w0 * g;
        if (base + 1 < w) dx[base + 1] += w1 * g;
        if (base + 2 < w) dx[base + 2] += w2 * g;
    }
}

// Row dot products for the weight gradient: sum_ox dy[ox] * x[2*ox - 1 + kx].
inline void weight_grad_row_s2(const double* x, int w, const double* dy, int ow, double* dwk) {
    double acc0 = 0.0, acc1 = 0.0, acc2 = 0.0;
    acc1 += dy[0] * x[0];
    if (w >= 2) acc2 += dy[0] * x[1];
    const int interior_hi = std::min(ow - 1, (w - 2) / 2);
    for (int ox = 1; ox <= interior_hi; ++ox) {
        const double* p = x + 2 * ox - 1;
        const double g = dy[ox];
        acc0 += g * p[0];
        acc1 += g * p[1];
        acc2 += g * p[2];
    }
    for (int ox = interior_hi + 1; ox <= ow - 1; ++ox) {
        const int base = 2 * ox - 1;
        const double g = dy[ox];
        acc0 += g * x[base];
        if (base + 1 < w) acc1 += g * x[base + 1];
        if (base + 2 < w) acc2 += g * x[base + 2];
    }
    dwk[0] += acc0;
    dwk[1] += acc1;
    dwk[2] += acc2;
}

void conv_forward(const Tensor& x, const ConvLayer& layer, Tensor& y) {
    const int h = static_cast<int>(x.shape[1]), w = static_cast<int>(x.shape[2]);
    const int oh = conv_out_side(h, layer.stride), ow = conv_out_side(w, layer.stride);
    y = Tensor::zeros({static_cast<size_t>(layer.out_ch), static_cast<size_t>(oh),
                       static_cast<size_t>(ow)});
    for (int co = 0; co < layer.out_ch; ++co) {
        double* yc = y.ptr() + static_cast<size_t>(co) * oh * ow;
        std::fill(yc, yc + static_cast<size_t>(oh) * ow, layer.bias.data[co]);
        for (int ci = 0; ci < layer.in_ch; ++ci) {
            const double* xc = x.ptr() + static_cast<size_t>(ci) * h * w;
            const double* wk =
                layer.weight.ptr() + (static_cast<size_t>(co) * layer.in_ch + ci) * 9;
            for (int ky = 0; ky < 3; ++ky) {
                const double w0 = wk[ky * 3], w1 = wk[ky * 3 + 1], w2 = wk[ky * 3 + 2];
                for (int oy = 0; oy < oh; ++oy) {
                    const int iy = oy * 2 - 1 + ky;
                    if (iy < 0 || iy >= h) continue;
                    accum_row_s2(xc + static_cast<size_t>(iy) * w, w, w0, w1, w2,
                                 yc + static_cast<size_t>(oy) * ow, ow);
                }
            }
        }
    }
}

// dy is the gradient at the conv output. dx may be null for the first layer.
void conv_backward(const Tensor& x, const ConvLayer& layer, const Tensor& dy, Tensor* dx,
                   ConvLayer& grads) {
    const int h = static_cast<int>(x.shape[1]), w = static_cast<int>(x.shape[2]);
    const int oh = static_cast<int>(dy.shape[1]), ow = static_cast<int>(dy.shape[2]);
    if (dx) *dx = Tensor::zeros(x.shape);
    for (int co = 0; co < layer.out_ch; ++co) {
        const double* dyc = dy.ptr() + static_cast<size_t>(co) * oh * ow;
        double bias_acc = 0.0;
        for (size_t i = 0; i < static_cast<size_t>(oh) * ow; ++i) bias_acc += dyc[i];
        grads.bias.data[co] += bias_acc;
        for (int ci = 0; ci < layer.in_ch; ++ci) {
            const double* xc = x.ptr() + static_cast<size_t>(ci) * h * w;
            const double* wk =
                layer.weight.ptr() + (static_cast<size_t>(co) * layer.in_ch + ci) * 9;
            double* dwk =
                grads.weight.ptr() + (static_cast<size_t>(co) * layer.in_ch + ci) * 9;
            double* dxc = dx ? dx->ptr() + static_cast<size_t>(ci) * h * w : nullptr;
            for (int ky = 0; ky < 3; ++ky) {
                for (int oy = 0; oy < oh; ++oy) {
                    const int iy = oy * 2 - 1 + ky;
                    if (iy < 0 || iy >= h) continue;
                    const double* dyrow = dyc + static_cast<size_t>(oy) * ow;
                    weight_grad_row_s2(xc + static_cast<size_t>(iy) * w, w, dyrow, ow,
                                       dwk + ky * 3);
                    if (dxc) {
                        scatter_row_s2(dxc + static_cast<size_t>(iy) * w, w, wk[ky * 3],
                                       wk[ky * 3 + 1], wk[ky * 3 + 2], dyrow, ow);
                    }
                }
            }
        }
    }
}

void linear_forward(const std::vector<double>& x, const LinearLayer& layer,
                    std::vector<double>& y) {
    if (static_cast<int>(x.size()) != layer.in_dim) {
        throw ValidationError("linear layer width mismatch: input " + std::to_string(x.size()) +
                              " vs expected " + std::to_string(layer.in_dim));
    }
    y.assign(layer.out_dim, 0.0);
    for (int o = 0; o < layer.out_dim; ++o) {
        const double* wrow = layer.weight.ptr() + static_cast<size_t>(o) * layer.in_dim;
        double acc = layer.bias.data[o];
        for (int i = 0; i < layer.in_dim; ++i) acc += wrow[i] * x[i];
        y[o] = acc;
    }
}

void linear_backward(const std::vector<double>& x, const LinearLayer& layer,
                     const std::vector<double>& dy, std::vector<double>* dx,
                     LinearLayer& grads) {
    if (dx) dx->assign(layer.in_dim, 0.0);
    for (int o = 0; o < layer.out_dim; ++o) {
        const double g = dy[o];
        grads.bias.data[o] += g;
        const double* wrow = layer.weight.ptr() + static_cast<size_t>(o) * layer.in_dim;
        double* dwrow = grads.weight.ptr() + static_cast<size_t>(o) * layer.in_dim;
        for (int i = 0; i < layer.in_dim; ++i) dwrow[i] += g * x[i];
        if (dx) {
            for (int i = 0; i < layer.in_dim; ++i) (*dx)[i] += g * wrow[i];
        }
    }
}

} // namespace

// --- Construction -----------------------------------------------------------

namespace {

ConvLayer make_conv(int in_ch, int out_ch) {
    ConvLayer layer;
    layer.in_ch = in_ch;
    layer.out_ch = out_ch;
    layer.stride = 2;
    layer.weight = Tensor::zeros({static_cast<size_t>(out_ch), static_cast<size_t>(in_ch), 3, 3});
    layer.bias = Tensor::zeros({static_cast<size_t>(out_ch)});
    return layer;
}

LinearLayer make_linear(int in_dim, int out_dim) {
    LinearLayer layer;
    layer.in_dim = in_dim;
    layer.out_dim = out_dim;
    layer.weight = Tensor::zeros({static_cast<size_t>(out_dim), static_cast<size_t>(in_dim)});
    layer.bias = Tensor::zeros({static_cast<size_t>(out_dim)});
    return layer;
}

RegionalModelParams make_regional_skeleton(const ModelConfig& config) {
    const int k = config.encoder.base_width;
    RegionalModelParams p;
    p.encoder.convs.push_back(make_conv(3, k));      // stage0, to /2
    p.encoder.convs.push_back(make_conv(k, k));      // stage0, to /4
    p.encoder.convs.push_back(make_conv(k, 2 * k));  // stage1, to /8
    p.encoder.convs.push_back(make_conv(2 * k, 4 * k)); // stage2, to /16
    p.encoder.convs.push_back(make_conv(4 * k, 8 * k)); // stage3, to /32
    p.embed = make_linear(8 * k, config.embed_dim);
    p.attention.fc1 = make_linear(config.embed_dim, config.attention_hidden);
    p.attention.fc2 = make_linear(config.attention_hidden, 1);
    p.head = make_linear(config.embed_dim, 1);
    return p;
}

void init_tensor_uniform(Tensor& t, double bound, Rng& rng) {
    for (double& v : t.data) v = rng.uniform(-bound, bound);
}

void init_regional(RegionalModelParams& p, Rng rng) {
    for (auto& conv : p.encoder.convs) {
        init_tensor_uniform(conv.weight, std::sqrt(3.0 / (conv.in_ch * 9)), rng);
    }
    init_tensor_uniform(p.embed.weight, std::sqrt(3.0 / p.embed.in_dim), rng);
    init_tensor_uniform(p.attention.fc1.weight, std::sqrt(3.0 / p.attention.fc1.in_dim), rng);
    init_tensor_uniform(p.attention.fc2.weight, std::sqrt(3.0 / p.attention.fc2.in_dim), rng);
    init_tensor_uniform(p.head.weight, std::sqrt(3.0 / p.head.in_dim), rng);
}

} // namespace

PsoNetParams init_params(const ModelConfig& config, uint64_t seed) {
    // Input-size divisibility is enforced where datasets are assembled;
    // the encoder itself handles any side via ceil division, which the
    // reduced-scale gradient checks rely on.
    if (config.encoder.base_width < 1 || config.embed_dim < 1 || config.attention_hidden < 1) {
        throw ValidationError("model config widths must be positive");
    }
    PsoNetParams params;
    params.config = config;
    Rng root(seed);
    for (size_t r = 0; r < 4; ++r) {
        params.regions[r] = make_regional_skeleton(config);
        init_regional(params.regions[r], root.fork(r + 1));
    }
    if (config.shared_encoder) {
        for (size_t r = 1; r < 4; ++r) params.regions[r].encoder = params.regions[0].encoder;
    }
    return params;
}

RegionalModelParams zero_like(const RegionalModelParams& p) {
    RegionalModelParams z = p;
    for (Tensor* t : collect_tensors(z)) t->fill(0.0);
    return z;
}

PsoNetParams zero_like(const PsoNetParams& p) {
    PsoNetParams z = p;
    for (auto& region : z.regions) {
        for (Tensor* t : collect_tensors(region)) t->fill(0.0);
    }
    return z;
}

std::vector<Tensor*> collect_tensors(RegionalModelParams& p) {
    std::vector<Tensor*> out;
    for (auto& conv : p.encoder.convs) {
        out.push_back(&conv.weight);
        out.push_back(&conv.bias);
    }
    for (LinearLayer* l : {&p.embed, &p.attention.fc1, &p.attention.fc2, &p.head}) {
        out.push_back(&l->weight);
        out.push_back(&l->bias);
    }
    return out;
}

std::vector<const Tensor*> collect_tensors(const RegionalModelParams& p) {
    std::vector<const Tensor*> out;
    for (Tensor* t : collect_tensors(const_cast<RegionalModelParams&>(p))) out.push_back(t);
    return out;
}

namespace {

std::vector<std::string> regional_tensor_names(const RegionalModelParams& p) {
    std::vector<std::string> names;
    const std::array<const char*, 5> conv_names = {"stage0.conv0", "stage0.conv1", "stage1.conv",
                                                   "stage2.conv", "stage3.conv"};
    for (size_t i = 0; i < p.encoder.convs.size(); ++i) {
        names.push_back("encoder." + std::string(conv_names[i]) + ".weight");
        names.push_back("encoder." + std::string(conv_names[i]) + ".bias");
    }
    for (const char* block : {"embed", "attention.fc1", "attention.fc2", "head"}) {
        names.push_back(std::string(block) + ".weight");
        names.push_back(std::string(block) + ".bias");
    }
    return names;
}

} // namespace

std::vector<std::pair<std::string, Tensor*>> collect_named_tensors(RegionalModelParams& p,
                                                                   const std::string& prefix) {
    const auto names = regional_tensor_names(p);
    const auto tensors = collect_tensors(p);
    std::vector<std::pair<std::string, Tensor*>> out;
    for (size_t i = 0; i < tensors.size(); ++i) out.emplace_back(prefix + names[i], tensors[i]);
    return out;
}

std::vector<std::pair<std::string, Tensor*>> collect_named_tensors(PsoNetParams& p) {
    std::vector<std::pair<std::string, Tensor*>> out;
    for (auto region : pasi::kAllRegions) {
        const auto prefix = "region." + std::string(pasi::region_code(region)) + ".";
        auto named = collect_named_tensors(p.regions[static_cast<size_t>(region)], prefix);
        out.insert(out.end(), named.begin(), named.end());
    }
    return out;
}

void accumulate(RegionalModelParams& into, const RegionalModelParams& grads) {
    auto dst = collect_tensors(into);
    auto src = collect_tensors(grads);
    for (size_t i = 0; i < dst.size(); ++i) {
        for (size_t j = 0; j < dst[i]->data.size(); ++j) dst[i]->data[j] += src[i]->data[j];
    }
}

// --- Forward ----------------------------------------------------------------

ImageFeature encode(const ImageF& image, const EncoderParams& params, EncoderCache* cache) {
    if (params.convs.empty()) throw ValidationError("encoder has no layers");
    if (image.channels != params.convs.front().in_ch) {
        throw ValidationError("encoder expects " + std::to_string(params.convs.front().in_ch) +
                              " channels, got " + std::to_string(image.channels));
    }

    Tensor current;
    current.shape = {static_cast<size_t>(image.channels), static_cast<size_t>(image.height),
                     static_cast<size_t>(image.width)};
    current.data = image.values;

    if (cache) {
        cache->inputs.clear();
        cache->preacts.clear();
    }

    for (const auto& conv : params.convs) {
        if (static_cast<int>(current.shape[0]) != conv.in_ch) {
            throw ValidationError("encoder stage width mismatch");
        }
        Tensor out;
        conv_forward(current, conv, out);
        if (cache) {
            cache->inputs.push_back(std::move(current));
            cache->preacts.push_back(out);
        }
        for (double& v : out.data) v = elu(v);
        current = std::move(out);
    }

    ImageFeature feature;
    feature.spatial = std::move(current);
    const size_t channels = feature.spatial.shape[0];
    const size_t plane = feature.spatial.shape[1] * feature.spatial.shape[2];
    feature.pooled.assign(channels, 0.0);
    for (size_t c = 0; c < channels; ++c) {
        const double* p = feature.spatial.ptr() + c * plane;
        double acc = 0.0;
        for (size_t i = 0; i < plane; ++i) acc += p[i];
        feature.pooled[c] = acc / static_cast<double>(plane);
    }
    return feature;
}

std::vector<double> embed(const ImageFeature& feature, const LinearLayer& layer,
                          std::vector<double>* preact) {
    std::vector<double> z;
    linear_forward(feature.pooled, layer, z);
    if (preact) *preact = z;
    for (double& v : z) v = gelu(v);
    return z;
}

AttentionOutput attention_pool(const std::vector<std::vector<double>>& embeddings,
                               const std::vector<bool>& valid, const AttentionParams& params,
                               AttentionCache* cache) {
    const size_t n = valid.size();
    if (embeddings.size() != n) {
        throw ValidationError("attention: embeddings and mask lengths differ");
    }

    AttentionOutput out;
    out.weights.assign(n, 0.0);
    out.logits.assign(n, -std::numeric_limits<double>::infinity());
    if (cache) cache->hidden.assign(n, {});

    size_t n_valid = 0;
    for (size_t i = 0; i < n; ++i) {
        if (!valid[i]) continue;
        ++n_valid;
        std::vector<double> h;
        linear_forward(embeddings[i], params.fc1, h);
        for (double& v : h) v = std::tanh(v);
        std::vector<double> logit;
        linear_forward(h, params.fc2, logit);
        out.logits[i] = logit[0];
        if (cache) cache->hidden[i] = std::move(h);
    }
    if (n_valid == 0) {
        throw ValidationError("attention requires at least one valid image slot");
    }

    double max_logit = -std::numeric_limits<double>::infinity();
    for (size_t i = 0; i < n; ++i) {
        if (valid[i]) max_logit = std::max(max_logit, out.logits[i]);
    }
    double denom = 0.0;
    for (size_t i = 0; i < n; ++i) {
        if (!valid[i]) continue;
        out.weights[i] = std::exp(out.logits[i] - max_logit);
        denom += out.weights[i];
    }
    const size_t dim = params.fc1.in_dim;
    out.pooled.assign(dim, 0.0);
    for (size_t i = 0; i < n; ++i) {
        if (!valid[i]) continue;
        out.weights[i] /= denom;
        const double wi = out.weights[i];
        const auto& e = embeddings[i];
        for (size_t d = 0; d < dim; ++d) out.pooled[d] += wi * e[d];
    }
    return out;
}

RegionalOutput regional_forward(const dataio::RegionalImageSet& set,
                                const RegionalModelParams& params, RegionalCache* cache) {
    const size_t n = set.images.size();
    std::vector<std::vector<double>> embeddings(n);

    RegionalCache local;
    RegionalCache& c = cache ? *cache : local;
    c = RegionalCache{};

    const bool keep_spatial = cache != nullptr;
    for (size_t i = 0; i < n; ++i) {
        if (!set.valid[i]) continue;
        c.valid_slots.push_back(static_cast<int>(i));
        EncoderCache enc_cache;
        ImageFeature feature =
            encode(set.images[i], params.encoder, keep_spatial ? &enc_cache : nullptr);
        std::vector<double> pre;
        embeddings[i] = embed(feature, params.embed, &pre);
        if (keep_spatial) {
            c.encoder.push_back(std::move(enc_cache));
            c.features.push_back(std::move(feature));
            c.embed_pre.push_back(std::move(pre));
        }
    }

    AttentionOutput attn =
        attention_pool(embeddings, set.valid, params.attention, keep_spatial ? &c.attention : nullptr);

    std::vector<double> raw;
    linear_forward(attn.pooled, params.head, raw);
    const double raw_score = raw[0];
    const double clamped = std::clamp(raw_score, kScoreMin, kScoreMax);

    if (keep_spatial) {
        c.embeddings = std::move(embeddings);
        c.attention_out = attn;
        c.raw_score = raw_score;
    }

    RegionalOutput out;
    out.score = pasi::RegionalPasi{clamped, set.region};
    out.attention = std::move(attn);
    return out;
}

AbsoluteOutput absolute_forward(const dataio::VisitSample& sample, const PsoNetParams& params) {
    AbsoluteOutput out;
    std::vector<pasi::RegionalPasi> scores;
    for (auto region : pasi::kAllRegions) {
        const auto idx = static_cast<size_t>(region);
        out.regions[idx] = regional_forward(sample.region_sets[idx], params.regions[idx]);
        scores.push_back(out.regions[idx].score);
    }
    out.total = pasi::total_pasi(scores);
    return out;
}

// --- Backward ---------------------------------------------------------------

namespace {

// Gradient of the score w.r.t. one image's embedding, including the softmax
// coupling through that image's logit.
std::vector<double> score_embedding_gradient(const RegionalModelParams& params,
                                             const RegionalCache& cache, size_t slot,
                                             const std::vector<double>& dpooled,
                                             double* dlogit_out) {
    const auto& attn = cache.attention_out;
    const size_t dim = params.attention.fc1.in_dim;

    // s_j = dpooled . e_j contributes through the softmax jacobian.
    double weighted_sum = 0.0; // sum_j w_j s_j
    for (int j : cache.valid_slots) {
        const auto& ej = cache.embeddings[j];
        double sj = 0.0;
        for (size_t d = 0; d < dim; ++d) sj += dpooled[d] * ej[d];
        weighted_sum += attn.weights[j] * sj;
    }
    const auto& e = cache.embeddings[slot];
    double s_i = 0.0;
    for (size_t d = 0; d < dim; ++d) s_i += dpooled[d] * e[d];
    const double wi = attn.weights[slot];
    const double dlogit = wi * (s_i - weighted_sum);
    if (dlogit_out) *dlogit_out = dlogit;

    // Direct term plus the logit path through fc2/tanh/fc1.
    std::vector<double> de(dim, 0.0);
    for (size_t d = 0; d < dim; ++d) de[d] = wi * dpooled[d];

    const auto& h = cache.attention.hidden[slot];
    const int hidden = params.attention.fc1.out_dim;
    std::vector<double> dh(hidden, 0.0);
    for (int a = 0; a < hidden; ++a) {
        const double dtanh = dlogit * params.attention.fc2.weight.data[a];
        dh[a] = dtanh * (1.0 - h[a] * h[a]);
    }
    for (int a = 0; a < hidden; ++a) {
        const double* wrow = params.attention.fc1.weight.ptr() + static_cast<size_t>(a) * dim;
        const double g = dh[a];
        for (size_t d = 0; d < dim; ++d) de[d] += g * wrow[d];
    }
    return de;
}

} // namespace

void regional_backward(double dscore, const dataio::RegionalImageSet& set,
                       const RegionalModelParams& params, const RegionalCache& cache,
                       RegionalModelParams& grads) {
    if (cache.valid_slots.empty()) {
        throw ValidationError("regional_backward needs a cached forward pass");
    }
    // Clamp subgradient: inside [0, 72] the clamp is the identity. At a
    // saturated rail the true subgradient is zero, which would freeze a
    // region whose raw score drifts negative at init; gradient is let
    // through only when the update direction pulls the score back into
    // range (descent moves against dscore).
    if (cache.raw_score < kScoreMin && dscore >= 0.0) return;
    if (cache.raw_score > kScoreMax && dscore <= 0.0) return;
    if (dscore == 0.0) return;

    const size_t dim = params.head.in_dim;
    const auto& attn = cache.attention_out;

    // Head.
    std::vector<double> dpooled;
    linear_backward(attn.pooled, params.head, {dscore}, &dpooled, grads.head);

    // Attention: softmax jacobian shared across slots.
    double weighted_sum = 0.0;
    std::vector<double> s(cache.valid_slots.size(), 0.0);
    for (size_t k = 0; k < cache.valid_slots.size(); ++k) {
        const auto& e = cache.embeddings[cache.valid_slots[k]];
        double sj = 0.0;
        for (size_t d = 0; d < dim; ++d) sj += dpooled[d] * e[d];
        s[k] = sj;
        weighted_sum += attn.weights[cache.valid_slots[k]] * sj;
    }

    for (size_t k = 0; k < cache.valid_slots.size(); ++k) {
        const int slot = cache.valid_slots[k];
        const double wi = attn.weights[slot];
        const double dlogit = wi * (s[k] - weighted_sum);
        const auto& e = cache.embeddings[slot];
        const auto& h = cache.attention.hidden[slot];

        // de = direct + fc1^T ( (1 - h^2) .* fc2 * dlogit ); fc2/fc1 grads.
        std::vector<double> dh(params.attention.fc1.out_dim, 0.0);
        for (int a = 0; a < params.attention.fc1.out_dim; ++a) {
            const double dtanh = dlogit * params.attention.fc2.weight.data[a];
            dh[a] = dtanh * (1.0 - h[a] * h[a]);
            grads.attention.fc2.weight.data[a] += dlogit * h[a];
        }
        grads.attention.fc2.bias.data[0] += dlogit;

        std::vector<double> de(dim, 0.0);
        for (size_t d = 0; d < dim; ++d) de[d] = wi * dpooled[d];
        for (int a = 0; a < params.attention.fc1.out_dim; ++a) {
            const double g = dh[a];
            grads.attention.fc1.bias.data[a] += g;
            const double* wrow =
                params.attention.fc1.weight.ptr() + static_cast<size_t>(a) * dim;
            double* dwrow =
                grads.attention.fc1.weight.ptr() + static_cast<size_t>(a) * dim;
            for (size_t d = 0; d < dim; ++d) {
                dwrow[d] += g * e[d];
                de[d] += g * wrow[d];
            }
        }

        // Embed MLP.
        const auto& pre = cache.embed_pre[k];
        std::vector<double> dz(pre.size());
        for (size_t d = 0; d < pre.size(); ++d) dz[d] = de[d] * gelu_grad(pre[d]);
        std::vector<double> dpooled_feat;
        linear_backward(cache.features[k].pooled, params.embed, dz, &dpooled_feat, grads.embed);

        // Global average pool.
        const auto& spatial = cache.features[k].spatial;
        const size_t plane = spatial.shape[1] * spatial.shape[2];
        Tensor dspatial = Tensor::zeros(spatial.shape);
        for (size_t c = 0; c < spatial.shape[0]; ++c) {
            const double g = dpooled_feat[c] / static_cast<double>(plane);
            double* p = dspatial.ptr() + c * plane;
            for (size_t i = 0; i < plane; ++i) p[i] = g;
        }

        // Encoder stack.
        Tensor dcurrent = std::move(dspatial);
        for (size_t layer = params.encoder.convs.size(); layer-- > 0;) {
            const auto& conv = params.encoder.convs[layer];
            const auto& pre_act = cache.encoder[k].preacts[layer];
            for (size_t i = 0; i < dcurrent.data.size(); ++i) {
                dcurrent.data[i] *= elu_grad(pre_act.data[i]);
            }
            Tensor dinput;
            conv_backward(cache.encoder[k].inputs[layer], conv, dcurrent,
                          layer > 0 ? &dinput : nullptr, grads.encoder.convs[layer]);
            if (layer > 0) dcurrent = std::move(dinput);
        }
    }
}

Tensor spatial_feature_gradient(const RegionalModelParams& params, const RegionalCache& cache,
                                size_t valid_index) {
    if (valid_index >= cache.valid_slots.size()) {
        throw ValidationError("spatial_feature_gradient: valid_index out of range");
    }
    const int slot = cache.valid_slots[valid_index];
    const size_t dim = params.head.in_dim;

    double dscore = 1.0;
    if (cache.raw_score < kScoreMin || cache.raw_score > kScoreMax) dscore = 0.0;

    std::vector<double> dpooled(dim, 0.0);
    for (size_t d = 0; d < dim; ++d) dpooled[d] = dscore * params.head.weight.data[d];

    const auto de = score_embedding_gradient(params, cache, slot, dpooled, nullptr);

    const auto& pre = cache.embed_pre[valid_index];
    std::vector<double> dz(pre.size());
    for (size_t d = 0; d < pre.size(); ++d) dz[d] = de[d] * gelu_grad(pre[d]);

    std::vector<double> dpooled_feat(params.embed.in_dim, 0.0);
    for (int o = 0; o < params.embed.out_dim; ++o) {
        const double* wrow = params.embed.weight.ptr() + static_cast<size_t>(o) * params.embed.in_dim;
        const double g = dz[o];
        for (int i = 0; i < params.embed.in_dim; ++i) dpooled_feat[i] += g * wrow[i];
    }

    const auto& spatial = cache.features[valid_index].spatial;
    const size_t plane = spatial.shape[1] * spatial.shape[2];
    Tensor dspatial = Tensor::zeros(spatial.shape);
    for (size_t c = 0; c < spatial.shape[0]; ++c) {
        const double g = dpooled_feat[c] / static_cast<double>(plane);
        double* p = dspatial.ptr() + c * plane;
        for (size_t i = 0; i < plane; ++i) p[i] = g;
    }
    return dspatial;
}

} // namespace psonet::nnet
