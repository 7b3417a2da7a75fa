#pragma once

// Velocity predictor: a small 3-D U-Net (two average-pool downsamplings, two
// stride-2 transposed convolutions, skip connections by summation) with
// hand-written backward passes, an Adam optimiser, and a versioned
// checkpoint format.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include "json.hpp"

#include "atlasreg/grid.hpp"

namespace atlasreg::nn {

/// Channels x (z, y, x) activations, x fastest.
struct Tensor {
    int channels = 0;
    Shape3 shape{};
    std::vector<float> v;

    Tensor() = default;
    Tensor(int c, Shape3 s, float fill = 0.0f) : channels(c), shape(s), v(std::size_t(c) * std::size_t(s.size()), fill) {}

    std::int64_t voxels() const { return shape.size(); }
    float* channel(int c) { return v.data() + std::size_t(c) * std::size_t(voxels()); }
    const float* channel(int c) const { return v.data() + std::size_t(c) * std::size_t(voxels()); }
};

using RowMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

// ---------------------------------------------------------------------------
// Primitive ops

namespace ops {

/// 3x3x3 patches (zero padded) as rows (in_channels * 27) x voxels.
inline void im2col(const Tensor& in, std::vector<float>& cols)
{
    const Shape3 s = in.shape;
    const std::int64_t nv = s.size();
    cols.assign(std::size_t(in.channels) * 27 * std::size_t(nv), 0.0f);
    for (int c = 0; c < in.channels; ++c) {
        const float* src = in.channel(c);
        for (int t = 0; t < 27; ++t) {
            const int dx = t % 3 - 1, dy = (t / 3) % 3 - 1, dz = t / 9 - 1;
            float* dst = cols.data() + (std::size_t(c) * 27 + std::size_t(t)) * std::size_t(nv);
            const std::int64_t x0 = std::max<std::int64_t>(0, -dx), x1 = std::min<std::int64_t>(s.nx, s.nx - dx);
            for (std::int64_t z = 0; z < s.nz; ++z) {
                const std::int64_t zz = z + dz;
                if (zz < 0 || zz >= s.nz)
                    continue;
                for (std::int64_t y = 0; y < s.ny; ++y) {
                    const std::int64_t yy = y + dy;
                    if (yy < 0 || yy >= s.ny)
                        continue;
                    const float* row = src + s.index(0, yy, zz);
                    float* out = dst + s.index(0, y, z);
                    for (std::int64_t x = x0; x < x1; ++x)
                        out[x] = row[x + dx];
                }
            }
        }
    }
}

/// Adjoint of im2col, accumulated into `grad_in`.
inline void col2im(const std::vector<float>& cols, Tensor& grad_in)
{
    const Shape3 s = grad_in.shape;
    const std::int64_t nv = s.size();
    for (int c = 0; c < grad_in.channels; ++c) {
        float* dst = grad_in.channel(c);
        for (int t = 0; t < 27; ++t) {
            const int dx = t % 3 - 1, dy = (t / 3) % 3 - 1, dz = t / 9 - 1;
            const float* src = cols.data() + (std::size_t(c) * 27 + std::size_t(t)) * std::size_t(nv);
            const std::int64_t x0 = std::max<std::int64_t>(0, -dx), x1 = std::min<std::int64_t>(s.nx, s.nx - dx);
            for (std::int64_t z = 0; z < s.nz; ++z) {
                const std::int64_t zz = z + dz;
                if (zz < 0 || zz >= s.nz)
                    continue;
                for (std::int64_t y = 0; y < s.ny; ++y) {
                    const std::int64_t yy = y + dy;
                    if (yy < 0 || yy >= s.ny)
                        continue;
                    float* row = dst + s.index(0, yy, zz);
                    const float* g = src + s.index(0, y, z);
                    for (std::int64_t x = x0; x < x1; ++x)
                        row[x + dx] += g[x];
                }
            }
        }
    }
}

inline Tensor avg_pool2(const Tensor& in)
{
    const Shape3 s = in.shape;
    const Shape3 o{s.nx / 2, s.ny / 2, s.nz / 2};
    Tensor out(in.channels, o);
    for (int c = 0; c < in.channels; ++c) {
        const float* src = in.channel(c);
        float* dst = out.channel(c);
        for (std::int64_t z = 0; z < o.nz; ++z)
            for (std::int64_t y = 0; y < o.ny; ++y)
                for (std::int64_t x = 0; x < o.nx; ++x) {
                    float acc = 0.0f;
                    for (int d = 0; d < 8; ++d)
                        acc += src[s.index(2 * x + (d & 1), 2 * y + ((d >> 1) & 1), 2 * z + (d >> 2))];
                    dst[o.index(x, y, z)] = acc * 0.125f;
                }
    }
    return out;
}

inline Tensor avg_pool2_backward(const Tensor& grad_out, const Shape3& in_shape)
{
    Tensor g(grad_out.channels, in_shape);
    const Shape3 o = grad_out.shape;
    for (int c = 0; c < g.channels; ++c) {
        const float* src = grad_out.channel(c);
        float* dst = g.channel(c);
        for (std::int64_t z = 0; z < o.nz; ++z)
            for (std::int64_t y = 0; y < o.ny; ++y)
                for (std::int64_t x = 0; x < o.nx; ++x) {
                    const float v = src[o.index(x, y, z)] * 0.125f;
                    for (int d = 0; d < 8; ++d)
                        dst[in_shape.index(2 * x + (d & 1), 2 * y + ((d >> 1) & 1), 2 * z + (d >> 2))] += v;
                }
    }
    return g;
}

inline constexpr float kLeakySlope = 0.2f;

inline void leaky_relu_inplace(Tensor& t)
{
    for (auto& x : t.v)
        x = x > 0.0f ? x : kLeakySlope * x;
}

/// `act` is the post-activation output; its sign equals the input's.
inline void leaky_relu_backward_inplace(const Tensor& act, Tensor& grad)
{
    for (std::size_t i = 0; i < grad.v.size(); ++i)
        if (act.v[i] <= 0.0f)
            grad.v[i] *= kLeakySlope;
}

} // namespace ops

// ---------------------------------------------------------------------------
// Parameterised layers

struct Conv3 {
    int in = 0, out = 0;
    std::vector<float> weight; // out x (in * 27)
    std::vector<float> bias;   // out

    Conv3() = default;
    Conv3(int in_ch, int out_ch) : in(in_ch), out(out_ch), weight(std::size_t(in_ch * out_ch * 27), 0.0f), bias(std::size_t(out_ch), 0.0f) {}

    struct Cache {
        std::vector<float> cols;
    };

    Tensor forward(const Tensor& x, Cache* cache) const
    {
        std::vector<float> local;
        std::vector<float>& cols = cache ? cache->cols : local;
        ops::im2col(x, cols);
        const std::int64_t nv = x.voxels();
        Tensor y(out, x.shape);
        ConstMatrixMap w(weight.data(), out, in * 27);
        ConstMatrixMap c(cols.data(), in * 27, nv);
        MatrixMap o(y.v.data(), out, nv);
        o.noalias() = w * c;
        for (int k = 0; k < out; ++k)
            o.row(k).array() += bias[std::size_t(k)];
        return y;
    }

    /// Returns dL/dx; accumulates parameter gradients.
    Tensor backward(const Tensor& x_shape_ref, const Cache& cache, const Tensor& gy, std::vector<float>& gw,
                    std::vector<float>& gb, bool need_input_grad = true) const
    {
        const std::int64_t nv = gy.voxels();
        ConstMatrixMap g(gy.v.data(), out, nv);
        ConstMatrixMap c(cache.cols.data(), in * 27, nv);
        MatrixMap dw(gw.data(), out, in * 27);
        dw.noalias() += g * c.transpose();
        for (int k = 0; k < out; ++k)
            gb[std::size_t(k)] += g.row(k).sum();
        Tensor gx(in, x_shape_ref.shape);
        if (!need_input_grad)
            return gx;
        std::vector<float> gcols(std::size_t(in) * 27 * std::size_t(nv));
        ConstMatrixMap w(weight.data(), out, in * 27);
        MatrixMap gc(gcols.data(), in * 27, nv);
        gc.noalias() = w.transpose() * g;
        ops::col2im(gcols, gx);
        return gx;
    }
};

/// Kernel 2, stride 2 transposed convolution (exact 2x upsampling).
struct UpConv2 {
    int in = 0, out = 0;
    std::vector<float> weight; // (out * 8) x in
    std::vector<float> bias;   // out

    UpConv2() = default;
    UpConv2(int in_ch, int out_ch) : in(in_ch), out(out_ch), weight(std::size_t(in_ch * out_ch * 8), 0.0f), bias(std::size_t(out_ch), 0.0f) {}

    Tensor forward(const Tensor& x) const
    {
        const Shape3 s = x.shape;
        const Shape3 o{2 * s.nx, 2 * s.ny, 2 * s.nz};
        const std::int64_t nv = x.voxels();
        std::vector<float> tmp(std::size_t(out) * 8 * std::size_t(nv));
        ConstMatrixMap w(weight.data(), out * 8, in);
        ConstMatrixMap xi(x.v.data(), in, nv);
        MatrixMap t(tmp.data(), out * 8, nv);
        t.noalias() = w * xi;
        Tensor y(out, o);
        for (int c = 0; c < out; ++c) {
            float* dst = y.channel(c);
            for (int d = 0; d < 8; ++d) {
                const float* src = tmp.data() + (std::size_t(c) * 8 + std::size_t(d)) * std::size_t(nv);
                const int dx = d & 1, dy = (d >> 1) & 1, dz = d >> 2;
                for (std::int64_t z = 0; z < s.nz; ++z)
                    for (std::int64_t yy = 0; yy < s.ny; ++yy)
                        for (std::int64_t xx = 0; xx < s.nx; ++xx)
                            dst[o.index(2 * xx + dx, 2 * yy + dy, 2 * z + dz)] =
                                src[s.index(xx, yy, z)] + bias[std::size_t(c)];
            }
        }
        return y;
    }

    Tensor backward(const Tensor& x, const Tensor& gy, std::vector<float>& gw, std::vector<float>& gb) const
    {
        const Shape3 s = x.shape;
        const Shape3 o = gy.shape;
        const std::int64_t nv = x.voxels();
        std::vector<float> tmp(std::size_t(out) * 8 * std::size_t(nv));
        for (int c = 0; c < out; ++c) {
            const float* src = gy.channel(c);
            for (int d = 0; d < 8; ++d) {
                float* dst = tmp.data() + (std::size_t(c) * 8 + std::size_t(d)) * std::size_t(nv);
                const int dx = d & 1, dy = (d >> 1) & 1, dz = d >> 2;
                for (std::int64_t z = 0; z < s.nz; ++z)
                    for (std::int64_t yy = 0; yy < s.ny; ++yy)
                        for (std::int64_t xx = 0; xx < s.nx; ++xx) {
                            const float g = src[o.index(2 * xx + dx, 2 * yy + dy, 2 * z + dz)];
                            dst[s.index(xx, yy, z)] = g;
                            gb[std::size_t(c)] += g;
                        }
            }
        }
        ConstMatrixMap t(tmp.data(), out * 8, nv);
        ConstMatrixMap xi(x.v.data(), in, nv);
        MatrixMap dw(gw.data(), out * 8, in);
        dw.noalias() += t * xi.transpose();
        Tensor gx(in, s);
        ConstMatrixMap w(weight.data(), out * 8, in);
        MatrixMap gxi(gx.v.data(), in, nv);
        gxi.noalias() = w.transpose() * t;
        return gx;
    }
};

// ---------------------------------------------------------------------------
// Network

struct NetConfig {
    int in_channels = 2;
    std::array<int, 3> widths = {16, 32, 64};
    int kernel = 3;          // fixed: the conv layers are 3x3x3
    int grid_factor = 2;     // prediction grid = atlas grid downsampled by this factor
    double output_scale = 1.0;

    void validate() const
    {
        if (kernel != 3)
            throw std::invalid_argument("only kernel size 3 is supported");
        if (grid_factor < 1)
            throw std::invalid_argument("grid_factor must be >= 1");
        for (int w : widths)
            if (w < 1)
                throw std::invalid_argument("channel widths must be positive");
    }
};

inline void to_json(nlohmann::json& j, const NetConfig& c)
{
    j = {{"in_channels", c.in_channels}, {"widths", c.widths},          {"kernel", c.kernel},
         {"grid_factor", c.grid_factor}, {"output_scale", c.output_scale}, {"activation", "leaky_relu_0.2"},
         {"levels", "2 down / 2 up"},      {"skip", "sum"}};
}
inline void from_json(const nlohmann::json& j, NetConfig& c)
{
    c.in_channels = j.value("in_channels", c.in_channels);
    if (j.contains("widths"))
        c.widths = j.at("widths").get<std::array<int, 3>>();
    c.kernel = j.value("kernel", c.kernel);
    c.grid_factor = j.value("grid_factor", c.grid_factor);
    c.output_scale = j.value("output_scale", c.output_scale);
}

class VelocityNet {
public:
    VelocityNet() = default;

    /// He-normal initialisation from `seed`; the output layer starts at zero
    /// so an untrained net predicts the identity transform.
    VelocityNet(const NetConfig& cfg, std::uint64_t seed) : cfg_(cfg)
    {
        cfg_.validate();
        const auto [w0, w1, w2] = cfg_.widths;
        enc0a_ = Conv3(cfg_.in_channels, w0);
        enc0b_ = Conv3(w0, w0);
        enc1a_ = Conv3(w0, w1);
        enc1b_ = Conv3(w1, w1);
        bota_ = Conv3(w1, w2);
        botb_ = Conv3(w2, w2);
        up1_ = UpConv2(w2, w1);
        dec1_ = Conv3(w1, w1);
        up0_ = UpConv2(w1, w0);
        dec0_ = Conv3(w0, w0);
        head_ = Conv3(w0, 3);

        std::mt19937_64 rng(seed);
        auto he = [&](std::vector<float>& w, int fan_in) {
            const double sd = std::sqrt(2.0 / ((1.0 + ops::kLeakySlope * ops::kLeakySlope) * fan_in));
            std::normal_distribution<double> nd(0.0, sd);
            for (auto& x : w)
                x = float(nd(rng));
        };
        for (Conv3* c : {&enc0a_, &enc0b_, &enc1a_, &enc1b_, &bota_, &botb_, &dec1_, &dec0_})
            he(c->weight, c->in * 27);
        he(up1_.weight, up1_.in);
        he(up0_.weight, up0_.in);
    }

    const NetConfig& config() const { return cfg_; }

    /// Parameter tensors in a fixed order (checkpoint and optimiser layout).
    std::vector<std::vector<float>*> parameters()
    {
        std::vector<std::vector<float>*> p;
        for (Conv3* c : conv_layers()) {
            p.push_back(&c->weight);
            p.push_back(&c->bias);
        }
        for (UpConv2* u : {&up1_, &up0_}) {
            p.push_back(&u->weight);
            p.push_back(&u->bias);
        }
        return p;
    }
    std::vector<const std::vector<float>*> parameters() const
    {
        auto p = const_cast<VelocityNet*>(this)->parameters();
        return {p.begin(), p.end()};
    }

    std::vector<std::vector<float>> zero_gradients() const
    {
        std::vector<std::vector<float>> g;
        for (const auto* p : parameters())
            g.emplace_back(p->size(), 0.0f);
        return g;
    }

    struct Cache {
        Tensor x;
        Conv3::Cache c0a, c0b, c1a, c1b, cba, cbb, cd1, cd0, ch;
        Tensor a0a, e0, p0, a1a, e1, p1, aba, b, u1, s1, d1, u0, s0, d0;
    };

    /// x: in_channels on a grid whose dims are divisible by 4.
    Tensor forward(const Tensor& x, Cache* cache = nullptr) const
    {
        if (x.channels != cfg_.in_channels)
            throw std::invalid_argument("VelocityNet: wrong number of input channels");
        if (x.shape.nx % 4 || x.shape.ny % 4 || x.shape.nz % 4)
            throw std::invalid_argument("VelocityNet: input dims must be divisible by 4");
        Cache local;
        Cache& c = cache ? *cache : local;
        c.x = x;
        c.a0a = conv_act(enc0a_, c.x, c.c0a);
        c.e0 = conv_act(enc0b_, c.a0a, c.c0b);
        c.p0 = ops::avg_pool2(c.e0);
        c.a1a = conv_act(enc1a_, c.p0, c.c1a);
        c.e1 = conv_act(enc1b_, c.a1a, c.c1b);
        c.p1 = ops::avg_pool2(c.e1);
        c.aba = conv_act(bota_, c.p1, c.cba);
        c.b = conv_act(botb_, c.aba, c.cbb);
        c.u1 = up1_.forward(c.b);
        c.s1 = c.u1;
        add_inplace(c.s1, c.e1);
        c.d1 = conv_act(dec1_, c.s1, c.cd1);
        c.u0 = up0_.forward(c.d1);
        c.s0 = c.u0;
        add_inplace(c.s0, c.e0);
        c.d0 = conv_act(dec0_, c.s0, c.cd0);
        Tensor y = head_.forward(c.d0, &c.ch);
        if (cfg_.output_scale != 1.0)
            for (auto& v : y.v)
                v *= float(cfg_.output_scale);
        return y;
    }

    /// Accumulates dL/dparams (layout of parameters()) given dL/doutput.
    void backward(const Cache& c, Tensor gy, std::vector<std::vector<float>>& grads) const
    {
        if (cfg_.output_scale != 1.0)
            for (auto& v : gy.v)
                v *= float(cfg_.output_scale);
        auto slot = [&](int layer) -> std::pair<std::vector<float>&, std::vector<float>&> {
            return {grads[std::size_t(2 * layer)], grads[std::size_t(2 * layer + 1)]};
        };
        // conv_layers(): enc0a 0, enc0b 1, enc1a 2, enc1b 3, bota 4, botb 5, dec1 6, dec0 7, head 8; ups 9, 10
        auto [hw, hb] = slot(8);
        Tensor g = head_.backward(c.d0, c.ch, gy, hw, hb);
        g = conv_act_backward(dec0_, c.s0, c.cd0, c.d0, std::move(g), slot(7));
        Tensor g_e0 = g; // skip branch
        auto [u0w, u0b] = slot(10);
        g = up0_.backward(c.d1, g, u0w, u0b);
        g = conv_act_backward(dec1_, c.s1, c.cd1, c.d1, std::move(g), slot(6));
        Tensor g_e1 = g;
        auto [u1w, u1b] = slot(9);
        g = up1_.backward(c.b, g, u1w, u1b);
        g = conv_act_backward(botb_, c.aba, c.cbb, c.b, std::move(g), slot(5));
        g = conv_act_backward(bota_, c.p1, c.cba, c.aba, std::move(g), slot(4));
        g = ops::avg_pool2_backward(g, c.e1.shape);
        add_inplace(g, g_e1);
        g = conv_act_backward(enc1b_, c.a1a, c.c1b, c.e1, std::move(g), slot(3));
        g = conv_act_backward(enc1a_, c.p0, c.c1a, c.a1a, std::move(g), slot(2));
        g = ops::avg_pool2_backward(g, c.e0.shape);
        add_inplace(g, g_e0);
        g = conv_act_backward(enc0b_, c.a0a, c.c0b, c.e0, std::move(g), slot(1));
        conv_act_backward(enc0a_, c.x, c.c0a, c.a0a, std::move(g), slot(0), false);
    }

    friend bool operator==(const VelocityNet& a, const VelocityNet& b)
    {
        const auto pa = a.parameters(), pb = b.parameters();
        if (pa.size() != pb.size())
            return false;
        for (std::size_t i = 0; i < pa.size(); ++i)
            if (*pa[i] != *pb[i])
                return false;
        return true;
    }

private:
    std::vector<Conv3*> conv_layers()
    {
        return {&enc0a_, &enc0b_, &enc1a_, &enc1b_, &bota_, &botb_, &dec1_, &dec0_, &head_};
    }

    static void add_inplace(Tensor& a, const Tensor& b)
    {
        for (std::size_t i = 0; i < a.v.size(); ++i)
            a.v[i] += b.v[i];
    }

    static Tensor conv_act(const Conv3& conv, const Tensor& x, Conv3::Cache& cache)
    {
        Tensor y = conv.forward(x, &cache);
        ops::leaky_relu_inplace(y);
        return y;
    }

    static Tensor conv_act_backward(const Conv3& conv, const Tensor& x, const Conv3::Cache& cache, const Tensor& act,
                                    Tensor g, std::pair<std::vector<float>&, std::vector<float>&> slot,
                                    bool need_input_grad = true)
    {
        ops::leaky_relu_backward_inplace(act, g);
        return conv.backward(x, cache, g, slot.first, slot.second, need_input_grad);
    }

    NetConfig cfg_;
    Conv3 enc0a_, enc0b_, enc1a_, enc1b_, bota_, botb_, dec1_, dec0_, head_;
    UpConv2 up1_, up0_;
};

// ---------------------------------------------------------------------------
// Optimiser

struct Adam {
    double lr = 1e-3, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    std::int64_t t = 0;
    std::vector<std::vector<float>> m, v;

    void step(VelocityNet& net, const std::vector<std::vector<float>>& grads)
    {
        auto params = net.parameters();
        if (m.empty()) {
            for (const auto* p : params) {
                m.emplace_back(p->size(), 0.0f);
                v.emplace_back(p->size(), 0.0f);
            }
        }
        ++t;
        const double c1 = 1.0 - std::pow(beta1, double(t));
        const double c2 = 1.0 - std::pow(beta2, double(t));
        for (std::size_t k = 0; k < params.size(); ++k) {
            auto& p = *params[k];
            for (std::size_t i = 0; i < p.size(); ++i) {
                const double g = grads[k][i];
                m[k][i] = float(beta1 * m[k][i] + (1.0 - beta1) * g);
                v[k][i] = float(beta2 * v[k][i] + (1.0 - beta2) * g * g);
                const double mh = m[k][i] / c1, vh = v[k][i] / c2;
                p[i] = float(p[i] - lr * mh / (std::sqrt(vh) + eps));
            }
        }
    }
};

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[8] = {'A', 'T', 'L', 'R', 'G', 'N', 'E', 'T'};

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};
class CheckpointVersionError : public CheckpointError {
public:
    using CheckpointError::CheckpointError;
};

inline std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h = 1469598103934665603ull)
{
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

namespace detail {

template <class T>
void put(std::string& buf, const T& v)
{
    buf.append(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T take(const std::string& buf, std::size_t& pos)
{
    if (pos + sizeof(T) > buf.size())
        throw CheckpointError("checkpoint is truncated");
    T v;
    std::memcpy(&v, buf.data() + pos, sizeof(T));
    pos += sizeof(T);
    return v;
}

} // namespace detail

/// Serialised bytes: magic, version, metadata JSON, parameters, checksum.
/// `metadata` is stored verbatim (config hash, code version, ...).
inline std::string serialize(const VelocityNet& net, const nlohmann::json& metadata = nlohmann::json::object(),
                             std::uint32_t version = kCheckpointVersion)
{
    std::string buf(kCheckpointMagic, sizeof(kCheckpointMagic));
    detail::put(buf, version);
    nlohmann::json meta = metadata;
    meta["network"] = net.config();
    const std::string js = meta.dump();
    detail::put(buf, std::uint64_t(js.size()));
    buf += js;
    const auto params = net.parameters();
    detail::put(buf, std::uint64_t(params.size()));
    for (const auto* p : params) {
        detail::put(buf, std::uint64_t(p->size()));
        buf.append(reinterpret_cast<const char*>(p->data()), p->size() * sizeof(float));
    }
    detail::put(buf, fnv1a(buf.data(), buf.size()));
    return buf;
}

struct LoadedModel {
    VelocityNet net;
    nlohmann::json metadata;
};

inline LoadedModel deserialize(const std::string& buf)
{
    std::size_t pos = 0;
    if (buf.size() < sizeof(kCheckpointMagic) || std::memcmp(buf.data(), kCheckpointMagic, sizeof(kCheckpointMagic)))
        throw CheckpointError("not a velocity-net checkpoint (bad magic)");
    pos = sizeof(kCheckpointMagic);
    const auto version = detail::take<std::uint32_t>(buf, pos);
    if (version != kCheckpointVersion)
        throw CheckpointVersionError("checkpoint version " + std::to_string(version) + " is not supported (expected " +
                                     std::to_string(kCheckpointVersion) + ")");
    if (buf.size() < pos + sizeof(std::uint64_t))
        throw CheckpointError("checkpoint is truncated");
    const std::uint64_t stored = [&] {
        std::uint64_t s;
        std::memcpy(&s, buf.data() + buf.size() - sizeof(s), sizeof(s));
        return s;
    }();
    if (fnv1a(buf.data(), buf.size() - sizeof(std::uint64_t)) != stored)
        throw CheckpointError("checkpoint checksum mismatch (corrupt file)");
    const auto js_len = detail::take<std::uint64_t>(buf, pos);
    if (pos + js_len > buf.size())
        throw CheckpointError("checkpoint is truncated");
    LoadedModel out;
    try {
        out.metadata = nlohmann::json::parse(buf.substr(pos, js_len));
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(std::string("checkpoint metadata is unreadable: ") + e.what());
    }
    pos += js_len;
    out.net = VelocityNet(out.metadata.at("network").get<NetConfig>(), 0);
    auto params = out.net.parameters();
    const auto n = detail::take<std::uint64_t>(buf, pos);
    if (n != params.size())
        throw CheckpointError("checkpoint parameter count does not match the network config");
    for (auto* p : params) {
        const auto len = detail::take<std::uint64_t>(buf, pos);
        if (len != p->size() || pos + len * sizeof(float) > buf.size())
            throw CheckpointError("checkpoint parameter shape does not match the network config");
        std::memcpy(p->data(), buf.data() + pos, len * sizeof(float));
        pos += len * sizeof(float);
    }
    return out;
}

} // namespace atlasreg::nn
