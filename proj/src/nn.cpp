#include "unitscope/nn.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>

#include <Eigen/Dense>

#include "unitscope/parallel.hpp"

namespace unitscope {

namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;
using VecMap = Eigen::Map<Eigen::VectorXf>;
using ConstVecMap = Eigen::Map<const Eigen::VectorXf>;

std::atomic<int> g_jobs{1};

// Gradients are accumulated in fixed-size example chunks and the chunks summed in order, so the
// result is independent of the worker count.
constexpr int kGradChunk = 8;

struct Scratch {
    FloatBuffer col;
    FloatBuffer dcol;
};

// Per-thread buffers reused across examples and calls; large fresh allocations are page-faulted in
// on every use otherwise.
struct Workspace {
    FloatBuffer a, b, x, dcur, dnext;
    std::vector<FloatBuffer> tape;
    Scratch scratch;
};

Workspace& thread_workspace()
{
    thread_local Workspace ws;
    return ws;
}

void ensure_size(FloatBuffer& v, std::size_t n)
{
    if (v.size() < n) v.resize(n);
}

bool is_pointwise_conv(const LayerSpec& l)
{
    return l.kernel == 1 && l.stride == 1 && l.padding == 0;
}

void im2col(const float* in, int C, int H, int W, const LayerSpec& l, int Ho, int Wo, float* col)
{
    const int K = l.kernel, S = l.stride, P = l.padding;
    const int hw = Ho * Wo;
    for (int c = 0; c < C; ++c)
        for (int ky = 0; ky < K; ++ky)
            for (int kx = 0; kx < K; ++kx) {
                float* row = col + static_cast<std::size_t>((c * K + ky) * K + kx) * hw;
                const float* plane = in + static_cast<std::size_t>(c) * H * W;
                // output columns whose input column lies inside the image
                const int lo = std::clamp((P - kx + S - 1) / S, 0, Wo);
                const int hi = std::clamp((W - 1 + P - kx) / S + 1, lo, Wo);
                for (int oy = 0; oy < Ho; ++oy) {
                    const int iy = oy * S - P + ky;
                    float* dst = row + oy * Wo;
                    if (iy < 0 || iy >= H) {
                        std::fill(dst, dst + Wo, 0.0f);
                        continue;
                    }
                    const float* src = plane + static_cast<std::size_t>(iy) * W;
                    for (int ox = 0; ox < lo; ++ox) dst[ox] = 0.0f;
                    if (S == 1) {
                        const float* s1 = src - P + kx;
                        for (int ox = lo; ox < hi; ++ox) dst[ox] = s1[ox];
                    } else {
                        for (int ox = lo; ox < hi; ++ox) dst[ox] = src[ox * S - P + kx];
                    }
                    for (int ox = hi; ox < Wo; ++ox) dst[ox] = 0.0f;
                }
            }
}

void col2im(const float* col, int C, int H, int W, const LayerSpec& l, int Ho, int Wo, float* din)
{
    const int K = l.kernel, S = l.stride, P = l.padding;
    const int hw = Ho * Wo;
    for (int c = 0; c < C; ++c)
        for (int ky = 0; ky < K; ++ky)
            for (int kx = 0; kx < K; ++kx) {
                const float* row = col + static_cast<std::size_t>((c * K + ky) * K + kx) * hw;
                float* plane = din + static_cast<std::size_t>(c) * H * W;
                const int lo = std::clamp((P - kx + S - 1) / S, 0, Wo);
                const int hi = std::clamp((W - 1 + P - kx) / S + 1, lo, Wo);
                for (int oy = 0; oy < Ho; ++oy) {
                    const int iy = oy * S - P + ky;
                    if (iy < 0 || iy >= H) continue;
                    float* dst = plane + static_cast<std::size_t>(iy) * W;
                    const float* src = row + oy * Wo;
                    if (S == 1) {
                        float* d1 = dst - P + kx;
                        for (int ox = lo; ox < hi; ++ox) d1[ox] += src[ox];
                    } else {
                        for (int ox = lo; ox < hi; ++ox) dst[ox * S - P + kx] += src[ox];
                    }
                }
            }
}

struct ResizeAxis {
    std::vector<int> lo, hi;
    std::vector<float> frac;
};

ResizeAxis resize_axis(int in, int out)
{
    ResizeAxis a;
    a.lo.resize(out);
    a.hi.resize(out);
    a.frac.resize(out);
    for (int i = 0; i < out; ++i) {
        const double src = out > 1 ? static_cast<double>(i) * (in - 1) / (out - 1) : 0.0;
        int lo = static_cast<int>(std::floor(src));
        lo = std::clamp(lo, 0, in - 1);
        a.lo[i] = lo;
        a.hi[i] = std::min(lo + 1, in - 1);
        a.frac[i] = static_cast<float>(src - lo);
    }
    return a;
}

void layer_forward(const LayerSpec& l, const LayerParams* p, const Shape& in_shape, const Shape& out_shape,
                   const float* in, float* out, Scratch& scratch)
{
    switch (l.kind) {
    case LayerKind::conv2d: {
        const int C = in_shape[0], H = in_shape[1], W = in_shape[2];
        const int O = out_shape[0], Ho = out_shape[1], Wo = out_shape[2];
        const int k2 = C * l.kernel * l.kernel, hw = Ho * Wo;
        const float* col = in;
        if (!is_pointwise_conv(l)) {
            ensure_size(scratch.col, static_cast<std::size_t>(k2) * hw);
            im2col(in, C, H, W, l, Ho, Wo, scratch.col.data());
            col = scratch.col.data();
        }
        MatMap y(out, O, hw);
        y.noalias() = ConstMatMap(p->weight.storage().data(), O, k2) * ConstMatMap(col, k2, hw);
        const float* b = p->bias.storage().data();
        for (int o = 0; o < O; ++o) y.row(o).array() += b[o];
        return;
    }
    case LayerKind::relu: {
        const std::size_t n = shape_numel(in_shape);
        for (std::size_t i = 0; i < n; ++i) out[i] = in[i] > 0.0f ? in[i] : 0.0f;
        return;
    }
    case LayerKind::maxpool2x2: {
        const int C = in_shape[0], H = in_shape[1], W = in_shape[2];
        const int Ho = out_shape[1], Wo = out_shape[2];
        for (int c = 0; c < C; ++c) {
            const float* plane = in + static_cast<std::size_t>(c) * H * W;
            float* dst = out + static_cast<std::size_t>(c) * Ho * Wo;
            for (int oy = 0; oy < Ho; ++oy)
                for (int ox = 0; ox < Wo; ++ox) {
                    const float* r0 = plane + (2 * oy) * W + 2 * ox;
                    const float* r1 = r0 + W;
                    float m = r0[0];
                    if (r0[1] > m) m = r0[1];
                    if (r1[0] > m) m = r1[0];
                    if (r1[1] > m) m = r1[1];
                    dst[oy * Wo + ox] = m;
                }
        }
        return;
    }
    case LayerKind::upsample2x_bilinear: {
        const int C = in_shape[0], H = in_shape[1], W = in_shape[2];
        for (int c = 0; c < C; ++c)
            bilinear_resize(std::span<const float>(in + static_cast<std::size_t>(c) * H * W, H * W), H, W,
                            std::span<float>(out + static_cast<std::size_t>(c) * 4 * H * W, 4 * H * W), 2 * H,
                            2 * W);
        return;
    }
    case LayerKind::upsample2x_nearest: {
        const int C = in_shape[0], H = in_shape[1], W = in_shape[2];
        for (int c = 0; c < C; ++c) {
            const float* plane = in + static_cast<std::size_t>(c) * H * W;
            float* dst = out + static_cast<std::size_t>(c) * 4 * H * W;
            for (int y = 0; y < 2 * H; ++y)
                for (int x = 0; x < 2 * W; ++x) dst[y * 2 * W + x] = plane[(y / 2) * W + x / 2];
        }
        return;
    }
    case LayerKind::linear: {
        VecMap y(out, l.out_features);
        y.noalias() = ConstMatMap(p->weight.storage().data(), l.out_features, l.in_features) *
                      ConstVecMap(in, l.in_features);
        y += ConstVecMap(p->bias.storage().data(), l.out_features);
        return;
    }
    case LayerKind::softmax: {
        const int C = in_shape[0];
        const std::size_t plane = in_shape.size() == 1 ? 1 : shape_numel(Shape(in_shape.begin() + 1, in_shape.end()));
        for (std::size_t px = 0; px < plane; ++px) {
            float m = -std::numeric_limits<float>::infinity();
            for (int c = 0; c < C; ++c) m = std::max(m, in[c * plane + px]);
            double z = 0.0;
            for (int c = 0; c < C; ++c) {
                const float e = std::exp(in[c * plane + px] - m);
                out[c * plane + px] = e;
                z += e;
            }
            const auto inv = static_cast<float>(1.0 / z);
            for (int c = 0; c < C; ++c) out[c * plane + px] *= inv;
        }
        return;
    }
    }
}

// din is overwritten. grad may be null when parameter gradients are not wanted.
void layer_backward(const LayerSpec& l, const LayerParams* p, const Shape& in_shape, const Shape& out_shape,
                    const float* in, const float* out, const float* dout, float* din, LayerParams* grad,
                    bool need_din, Scratch& scratch)
{
    const std::size_t n_in = shape_numel(in_shape);
    switch (l.kind) {
    case LayerKind::conv2d: {
        const int C = in_shape[0], H = in_shape[1], W = in_shape[2];
        const int O = out_shape[0], Ho = out_shape[1], Wo = out_shape[2];
        const int k2 = C * l.kernel * l.kernel, hw = Ho * Wo;
        const float* col = in;
        if (!is_pointwise_conv(l)) {
            ensure_size(scratch.col, static_cast<std::size_t>(k2) * hw);
            im2col(in, C, H, W, l, Ho, Wo, scratch.col.data());
            col = scratch.col.data();
        }
        ConstMatMap dy(dout, O, hw);
        if (grad) {
            MatMap(grad->weight.storage().data(), O, k2).noalias() += dy * ConstMatMap(col, k2, hw).transpose();
            VecMap(grad->bias.storage().data(), O) += dy.rowwise().sum();
        }
        if (!need_din) return;
        const ConstMatMap w(p->weight.storage().data(), O, k2);
        if (is_pointwise_conv(l)) {
            MatMap(din, k2, hw).noalias() = w.transpose() * dy;
        } else {
            ensure_size(scratch.dcol, static_cast<std::size_t>(k2) * hw);
            MatMap(scratch.dcol.data(), k2, hw).noalias() = w.transpose() * dy;
            std::fill(din, din + n_in, 0.0f);
            col2im(scratch.dcol.data(), C, H, W, l, Ho, Wo, din);
        }
        return;
    }
    case LayerKind::relu:
        for (std::size_t i = 0; i < n_in; ++i) din[i] = in[i] > 0.0f ? dout[i] : 0.0f;
        return;
    case LayerKind::maxpool2x2: {
        const int C = in_shape[0], H = in_shape[1], W = in_shape[2];
        const int Ho = out_shape[1], Wo = out_shape[2];
        std::fill(din, din + n_in, 0.0f);
        for (int c = 0; c < C; ++c) {
            const float* plane = in + static_cast<std::size_t>(c) * H * W;
            float* dplane = din + static_cast<std::size_t>(c) * H * W;
            const float* g = dout + static_cast<std::size_t>(c) * Ho * Wo;
            for (int oy = 0; oy < Ho; ++oy)
                for (int ox = 0; ox < Wo; ++ox) {
                    const int base = (2 * oy) * W + 2 * ox;
                    const int cand[4] = {base, base + 1, base + W, base + W + 1};
                    int best = cand[0];
                    for (int k = 1; k < 4; ++k)
                        if (plane[cand[k]] > plane[best]) best = cand[k];
                    dplane[best] += g[oy * Wo + ox];
                }
        }
        return;
    }
    case LayerKind::upsample2x_bilinear: {
        const int C = in_shape[0], H = in_shape[1], W = in_shape[2];
        std::fill(din, din + n_in, 0.0f);
        for (int c = 0; c < C; ++c)
            bilinear_resize_backward(
                std::span<const float>(dout + static_cast<std::size_t>(c) * 4 * H * W, 4 * H * W), 2 * H, 2 * W,
                std::span<float>(din + static_cast<std::size_t>(c) * H * W, H * W), H, W);
        return;
    }
    case LayerKind::upsample2x_nearest: {
        const int C = in_shape[0], H = in_shape[1], W = in_shape[2];
        std::fill(din, din + n_in, 0.0f);
        for (int c = 0; c < C; ++c) {
            float* dplane = din + static_cast<std::size_t>(c) * H * W;
            const float* g = dout + static_cast<std::size_t>(c) * 4 * H * W;
            for (int y = 0; y < 2 * H; ++y)
                for (int x = 0; x < 2 * W; ++x) dplane[(y / 2) * W + x / 2] += g[y * 2 * W + x];
        }
        return;
    }
    case LayerKind::linear: {
        ConstVecMap dy(dout, l.out_features);
        if (grad) {
            MatMap(grad->weight.storage().data(), l.out_features, l.in_features).noalias() +=
                dy * ConstVecMap(in, l.in_features).transpose();
            VecMap(grad->bias.storage().data(), l.out_features) += dy;
        }
        if (need_din)
            VecMap(din, l.in_features).noalias() =
                ConstMatMap(p->weight.storage().data(), l.out_features, l.in_features).transpose() * dy;
        return;
    }
    case LayerKind::softmax: {
        const int C = in_shape[0];
        const std::size_t plane = in_shape.size() == 1 ? 1 : shape_numel(Shape(in_shape.begin() + 1, in_shape.end()));
        for (std::size_t px = 0; px < plane; ++px) {
            double dot = 0.0;
            for (int c = 0; c < C; ++c) dot += static_cast<double>(dout[c * plane + px]) * out[c * plane + px];
            for (int c = 0; c < C; ++c)
                din[c * plane + px] = out[c * plane + px] * static_cast<float>(dout[c * plane + px] - dot);
        }
        return;
    }
    }
}

const LayerParams* params_for(const LayerSpec& l, const ParameterStore& params)
{
    return l.has_params() ? &params.at(l.name) : nullptr;
}

} // namespace

void set_num_jobs(int jobs)
{
    g_jobs.store(std::max(1, jobs));
}

int num_jobs()
{
    return g_jobs.load();
}

void bilinear_resize(std::span<const float> src, int h, int w, std::span<float> dst, int out_h, int out_w)
{
    const ResizeAxis ay = resize_axis(h, out_h);
    const ResizeAxis ax = resize_axis(w, out_w);
    for (int y = 0; y < out_h; ++y) {
        const float* r0 = src.data() + static_cast<std::size_t>(ay.lo[y]) * w;
        const float* r1 = src.data() + static_cast<std::size_t>(ay.hi[y]) * w;
        const float fy = ay.frac[y];
        float* d = dst.data() + static_cast<std::size_t>(y) * out_w;
        for (int x = 0; x < out_w; ++x) {
            const int x0 = ax.lo[x], x1 = ax.hi[x];
            const float fx = ax.frac[x];
            const float top = r0[x0] + fx * (r0[x1] - r0[x0]);
            const float bot = r1[x0] + fx * (r1[x1] - r1[x0]);
            d[x] = top + fy * (bot - top);
        }
    }
}

void bilinear_resize_backward(std::span<const float> grad_out, int out_h, int out_w, std::span<float> grad_in,
                              int h, int w)
{
    const ResizeAxis ay = resize_axis(h, out_h);
    const ResizeAxis ax = resize_axis(w, out_w);
    for (int y = 0; y < out_h; ++y) {
        float* r0 = grad_in.data() + static_cast<std::size_t>(ay.lo[y]) * w;
        float* r1 = grad_in.data() + static_cast<std::size_t>(ay.hi[y]) * w;
        const float fy = ay.frac[y];
        const float* g = grad_out.data() + static_cast<std::size_t>(y) * out_w;
        for (int x = 0; x < out_w; ++x) {
            const int x0 = ax.lo[x], x1 = ax.hi[x];
            const float fx = ax.frac[x];
            const float top = g[x] * (1.0f - fy);
            const float bot = g[x] * fy;
            r0[x0] += top * (1.0f - fx);
            r0[x1] += top * fx;
            r1[x0] += bot * (1.0f - fx);
            r1[x1] += bot * fx;
        }
    }
}

ForwardResult forward(const ModelSpec& model, const ParameterStore& params, const Tensor& input,
                      const std::set<std::string>& record)
{
    ForwardOptions opts;
    opts.record = record;
    return forward(model, params, input, opts);
}

ForwardResult forward(const ModelSpec& model, const ParameterStore& params, const Tensor& input,
                      const ForwardOptions& options)
{
    model.validate();
    params.check_against(model);
    const std::vector<Shape> shapes = model.layer_shapes();
    const std::size_t first = options.resume_after ? model.tap_index(*options.resume_after) + 1 : 0;
    const std::size_t last = options.stop_after ? model.tap_index(*options.stop_after) : model.layers.size() - 1;
    const Shape in_shape = first == 0 ? model.input_shape : shapes[first - 1];

    const std::string& entry_name = first < model.layers.size() ? model.layers[first].name : model.layers.back().name;
    if (input.ndim() != in_shape.size() + 1 || input.item_shape() != in_shape)
        throw ModelError(entry_name, "input shape " + shape_str(input.shape()) + " does not match expected (N)" +
                                         shape_str(in_shape));
    const int n = input.dim(0);

    std::map<std::size_t, std::vector<std::string>> record_at, hook_at;
    for (const auto& name : options.record) {
        const std::size_t t = model.tap_index(name);
        if (t < first || t > last) throw ModelError(name, "recorded layer is outside the evaluated range");
        record_at[t].push_back(name);
    }
    if (options.hook)
        for (const auto& name : options.hook_layers) {
            const std::size_t t = model.tap_index(name);
            if (t >= first && t <= last) hook_at[t].push_back(name);
        }

    ForwardResult result;
    if (first > last) {
        result.output = input;
        return result;
    }
    Shape out_shape{n};
    out_shape.insert(out_shape.end(), shapes[last].begin(), shapes[last].end());
    result.output = Tensor(out_shape);
    for (const auto& [t, names] : record_at)
        for (const auto& name : names) {
            Shape s{n};
            s.insert(s.end(), shapes[t].begin(), shapes[t].end());
            result.activations[name] = Tensor(s);
        }

    std::size_t max_elems = shape_numel(in_shape);
    for (std::size_t i = first; i <= last; ++i) max_elems = std::max(max_elems, shape_numel(shapes[i]));

    parallel_for(static_cast<std::size_t>(n), num_jobs(), [&](std::size_t ex) {
        const int e = static_cast<int>(ex);
        Workspace& ws = thread_workspace();
        ensure_size(ws.a, max_elems);
        ensure_size(ws.b, max_elems);
        FloatBuffer& a = ws.a;
        FloatBuffer& b = ws.b;
        Scratch& scratch = ws.scratch;
        auto src = input.item(e);
        std::copy(src.begin(), src.end(), a.begin());
        Shape cur = in_shape;
        for (std::size_t i = first; i <= last; ++i) {
            const LayerSpec& l = model.layers[i];
            layer_forward(l, params_for(l, params), cur, shapes[i], a.data(), b.data(), scratch);
            std::swap(a, b);
            cur = shapes[i];
            const std::size_t count = shape_numel(cur);
            if (auto it = hook_at.find(i); it != hook_at.end())
                for (const auto& name : it->second) options.hook(name, e, std::span<float>(a.data(), count));
            if (auto it = record_at.find(i); it != record_at.end())
                for (const auto& name : it->second) {
                    auto dst = result.activations.at(name).item(e);
                    std::copy(a.begin(), a.begin() + static_cast<std::ptrdiff_t>(count), dst.begin());
                }
        }
        auto dst = result.output.item(e);
        std::copy(a.begin(), a.begin() + static_cast<std::ptrdiff_t>(dst.size()), dst.begin());
    });
    return result;
}

namespace {

// Per-example loss and gradient with respect to the model output (before normalisation).
double example_loss(const ModelSpec& model, LossKind kind, const Shape& out_shape, std::span<const float> out,
                    std::span<const float> target, std::span<float> dout, double scale)
{
    const bool ends_in_softmax = model.layers.back().kind == LayerKind::softmax;
    if (kind == LossKind::mean_squared_error) {
        double loss = 0.0;
        for (std::size_t i = 0; i < out.size(); ++i) {
            const double d = static_cast<double>(out[i]) - target[i];
            loss += d * d;
            dout[i] = static_cast<float>(2.0 * d * scale);
        }
        return loss;
    }
    const int C = out_shape[0];
    const std::size_t plane = out.size() / static_cast<std::size_t>(C);
    double loss = 0.0;
    for (std::size_t px = 0; px < plane; ++px) {
        const float tf = target[px];
        const int t = static_cast<int>(tf);
        if (static_cast<float>(t) != tf || t < 0 || t >= C)
            throw ModelError(model.layers.back().name, "cross-entropy target " + std::to_string(tf) +
                                                           " is not a class index below " + std::to_string(C));
        if (ends_in_softmax) {
            const double p = std::max(static_cast<double>(out[t * plane + px]), 1e-12);
            loss -= std::log(p);
            for (int c = 0; c < C; ++c) dout[c * plane + px] = 0.0f;
            dout[t * plane + px] = static_cast<float>(-scale / p);
        } else {
            double m = -std::numeric_limits<double>::infinity();
            for (int c = 0; c < C; ++c) m = std::max(m, static_cast<double>(out[c * plane + px]));
            double z = 0.0;
            for (int c = 0; c < C; ++c) z += std::exp(out[c * plane + px] - m);
            loss -= out[t * plane + px] - m - std::log(z);
            for (int c = 0; c < C; ++c) {
                const double p = std::exp(out[c * plane + px] - m) / z;
                dout[c * plane + px] = static_cast<float>((p - (c == t ? 1.0 : 0.0)) * scale);
            }
        }
    }
    return loss;
}

void add_into(ParameterStore& dst, const ParameterStore& src)
{
    for (auto& [name, p] : dst.layers()) {
        const auto& s = src.at(name);
        for (std::size_t i = 0; i < p.weight.size(); ++i) p.weight[i] += s.weight[i];
        for (std::size_t i = 0; i < p.bias.size(); ++i) p.bias[i] += s.bias[i];
    }
}

} // namespace

BackwardResult backward(const ModelSpec& model, const ParameterStore& params, const Tensor& input,
                        LossKind loss_kind, const Tensor& target, bool param_grads)
{
    model.validate();
    params.check_against(model);
    const std::vector<Shape> shapes = model.layer_shapes();
    if (input.ndim() != model.input_shape.size() + 1 || input.item_shape() != model.input_shape)
        throw ModelError(model.layers.front().name, "input shape " + shape_str(input.shape()) +
                                                        " does not match expected (N)" + shape_str(model.input_shape));
    const int n = input.dim(0);
    const Shape& out_shape = shapes.back();
    const std::size_t out_elems = shape_numel(out_shape);

    std::size_t per_target = 0;
    if (loss_kind == LossKind::mean_squared_error) {
        per_target = out_elems;
    } else {
        if (model.output == OutputSemantics::image)
            throw ModelError(model.layers.back().name, "cross-entropy needs class or segmentation logits");
        per_target = out_elems / static_cast<std::size_t>(out_shape[0]);
    }
    if (target.empty() || target.dim(0) != n || target.size() != per_target * static_cast<std::size_t>(n))
        throw ModelError(model.layers.back().name, "target shape " + shape_str(target.shape()) +
                                                       " does not fit the loss for output " + shape_str(out_shape));
    const double scale = 1.0 / (static_cast<double>(n) * static_cast<double>(per_target));

    BackwardResult result;
    Shape out_full{n};
    out_full.insert(out_full.end(), out_shape.begin(), out_shape.end());
    result.output = Tensor(out_full);
    result.input_grad = Tensor(input.shape());

    const std::size_t n_chunks = (static_cast<std::size_t>(n) + kGradChunk - 1) / kGradChunk;
    std::vector<ParameterStore> chunk_grads(n_chunks);
    std::vector<double> chunk_loss(n_chunks, 0.0);

    parallel_for(n_chunks, num_jobs(), [&](std::size_t chunk) {
        if (param_grads) chunk_grads[chunk] = ParameterStore::zeros_like(model);
        Workspace& ws = thread_workspace();
        Scratch& scratch = ws.scratch;
        std::vector<FloatBuffer>& tape = ws.tape;
        if (tape.size() < model.layers.size()) tape.resize(model.layers.size());
        FloatBuffer& dcur = ws.dcur;
        FloatBuffer& dnext = ws.dnext;
        FloatBuffer& x = ws.x;
        ensure_size(x, input.item_size());
        const int begin = static_cast<int>(chunk) * kGradChunk;
        const int end = std::min(n, begin + kGradChunk);
        for (int e = begin; e < end; ++e) {
            auto src = input.item(e);
            std::copy(src.begin(), src.end(), x.begin());
            Shape cur = model.input_shape;
            const float* in = x.data();
            for (std::size_t i = 0; i < model.layers.size(); ++i) {
                const LayerSpec& l = model.layers[i];
                ensure_size(tape[i], shape_numel(shapes[i]));
                layer_forward(l, params_for(l, params), cur, shapes[i], in, tape[i].data(), scratch);
                in = tape[i].data();
                cur = shapes[i];
            }
            auto out = std::span<const float>(tape[model.layers.size() - 1].data(), out_elems);
            std::copy(out.begin(), out.end(), result.output.item(e).begin());

            ensure_size(dcur, out_elems);
            std::fill(dcur.begin(), dcur.begin() + static_cast<std::ptrdiff_t>(out_elems), 0.0f);
            const double loss = example_loss(model, loss_kind, out_shape, out, target.item(e), dcur, scale);
            if (!std::isfinite(loss)) {
                for (std::size_t i = 0; i < model.layers.size(); ++i)
                    for (std::size_t k = 0; k < shape_numel(shapes[i]); ++k)
                        if (!std::isfinite(tape[i][k])) throw ModelError(model.layers[i].name, "non-finite activation");
                throw ModelError(model.layers.back().name, "non-finite loss");
            }
            chunk_loss[chunk] += loss;

            for (std::size_t i = model.layers.size(); i-- > 0;) {
                const LayerSpec& l = model.layers[i];
                const Shape& ishape = i == 0 ? model.input_shape : shapes[i - 1];
                const float* lin = i == 0 ? x.data() : tape[i - 1].data();
                ensure_size(dnext, shape_numel(ishape));
                LayerParams* g = param_grads && l.has_params() ? &chunk_grads[chunk].at(l.name) : nullptr;
                layer_backward(l, params_for(l, params), ishape, shapes[i], lin, tape[i].data(), dcur.data(),
                               dnext.data(), g, true, scratch);
                std::swap(dcur, dnext);
            }
            std::copy(dcur.begin(), dcur.begin() + static_cast<std::ptrdiff_t>(input.item_size()),
                      result.input_grad.item(e).begin());
        }
    });

    double total = 0.0;
    for (double l : chunk_loss) total += l;
    result.loss = total * scale;
    if (!std::isfinite(result.loss)) throw ModelError(model.layers.back().name, "non-finite loss");
    if (param_grads) {
        result.grads = std::move(chunk_grads[0]);
        for (std::size_t c = 1; c < n_chunks; ++c) add_into(result.grads, chunk_grads[c]);
    } else {
        result.grads = ParameterStore::zeros_like(model);
    }
    return result;
}

} // namespace unitscope
