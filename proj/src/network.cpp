#include "sketchdiff/network.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include <Eigen/Dense>

#include "sketchdiff/rng.hpp"

namespace sketchdiff {

// ---------------------------------------------------------------------------
// Config and layout

void NetworkConfig::validate() const {
    if (base_channels < 1) throw std::invalid_argument("base_channels must be positive");
    if (channel_multipliers.empty()) throw std::invalid_argument("need at least one level");
    for (int m : channel_multipliers) {
        if (m < 1) throw std::invalid_argument("channel multipliers must be positive");
    }
    if (residual_blocks_per_level < 1) {
        throw std::invalid_argument("residual_blocks_per_level must be positive");
    }
    if (time_embed_dim < 2 || time_embed_dim % 2 != 0) {
        throw std::invalid_argument("time_embed_dim must be even and >= 2");
    }
}

void NetworkConfig::check_input_extent(int height, int width) const {
    const int div = 1 << (levels() - 1);
    if (height % div != 0 || width % div != 0) {
        throw ShapeError("input " + std::to_string(height) + "x" + std::to_string(width) +
                         " not divisible by " + std::to_string(div));
    }
}

nlohmann::json NetworkConfig::to_json() const {
    return {{"base_channels", base_channels},
            {"channel_multipliers", channel_multipliers},
            {"residual_blocks_per_level", residual_blocks_per_level},
            {"time_embed_dim", time_embed_dim},
            {"input_channels", input_channels},
            {"output_channels", output_channels}};
}

NetworkConfig NetworkConfig::from_json(const nlohmann::json& j) {
    NetworkConfig c;
    c.base_channels = j.value("base_channels", c.base_channels);
    c.channel_multipliers = j.value("channel_multipliers", c.channel_multipliers);
    c.residual_blocks_per_level = j.value("residual_blocks_per_level", c.residual_blocks_per_level);
    c.time_embed_dim = j.value("time_embed_dim", c.time_embed_dim);
    if (j.value("input_channels", input_channels) != input_channels ||
        j.value("output_channels", output_channels) != output_channels) {
        throw std::invalid_argument("network must map 7 input channels to 3 output channels");
    }
    c.validate();
    return c;
}

std::size_t ParamLayout::add(std::string name, std::vector<int> shape) {
    if (by_name_.count(name)) throw std::logic_error("duplicate parameter " + name);
    std::size_t len = 1;
    for (int d : shape) len *= static_cast<std::size_t>(d);
    ParamInfo info{name, std::move(shape), total_, len};
    by_name_.emplace(std::move(name), entries_.size());
    entries_.push_back(std::move(info));
    total_ += len;
    return entries_.back().offset;
}

const ParamInfo* ParamLayout::find(const std::string& name) const {
    auto it = by_name_.find(name);
    return it == by_name_.end() ? nullptr : &entries_[it->second];
}

bool operator==(const ParamLayout& a, const ParamLayout& b) {
    if (a.entries_.size() != b.entries_.size()) return false;
    for (std::size_t i = 0; i < a.entries_.size(); ++i) {
        const auto& x = a.entries_[i];
        const auto& y = b.entries_[i];
        if (x.name != y.name || x.shape != y.shape || x.offset != y.offset) return false;
    }
    return true;
}

std::vector<double> timestep_embedding(double t, int dim) {
    if (dim < 2 || dim % 2 != 0) throw std::invalid_argument("timestep_embedding: dim must be even");
    const int half = dim / 2;
    std::vector<double> out(dim);
    for (int k = 0; k < half; ++k) {
        const double freq = std::pow(10000.0, -2.0 * k / dim);
        out[k] = std::sin(t * freq);
        out[half + k] = std::cos(t * freq);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Plan

namespace {

struct ConvDesc {
    int cin = 0, cout = 0, k = 3, stride = 1;
    std::size_t w = 0, b = 0;
};
struct NormDesc {
    int channels = 0, groups = 1;
    std::size_t gain = 0, bias = 0;
};
struct LinearDesc {
    int in = 0, out = 0;
    std::size_t w = 0, b = 0;
};
struct ResDesc {
    int cin = 0, cout = 0;
    NormDesc norm1;
    ConvDesc conv1;
    LinearDesc temb;
    NormDesc norm2;
    ConvDesc conv2;
    bool has_skip = false;
    ConvDesc skip;
};


ConvDesc add_conv(ParamLayout& L, const std::string& name, int cin, int cout, int k, int stride) {
    ConvDesc d{cin, cout, k, stride, 0, 0};
    d.w = L.add(name + ".weight", {cout, cin, k, k});
    d.b = L.add(name + ".bias", {cout});
    return d;
}
NormDesc add_norm(ParamLayout& L, const std::string& name, int channels) {
    NormDesc d{channels, norm_groups(channels), 0, 0};
    d.gain = L.add(name + ".gain", {channels});
    d.bias = L.add(name + ".bias", {channels});
    return d;
}
LinearDesc add_linear(ParamLayout& L, const std::string& name, int in, int out) {
    LinearDesc d{in, out, 0, 0};
    d.w = L.add(name + ".weight", {out, in});
    d.b = L.add(name + ".bias", {out});
    return d;
}
ResDesc add_res(ParamLayout& L, const std::string& name, int cin, int cout, int temb_dim) {
    ResDesc r;
    r.cin = cin;
    r.cout = cout;
    r.norm1 = add_norm(L, name + ".norm1", cin);
    r.conv1 = add_conv(L, name + ".conv1", cin, cout, 3, 1);
    r.temb = add_linear(L, name + ".time_proj", temb_dim, cout);
    r.norm2 = add_norm(L, name + ".norm2", cout);
    r.conv2 = add_conv(L, name + ".conv2", cout, cout, 3, 1);
    if (cin != cout) {
        r.has_skip = true;
        r.skip = add_conv(L, name + ".shortcut", cin, cout, 1, 1);
    }
    return r;
}

}  // namespace

struct UNet::Plan {
    struct Encoder {
        std::vector<ResDesc> blocks;
        bool has_down = false;
        ConvDesc down;
    };
    struct Decoder {
        int level = 0;
        int skip_channels = 0;
        std::vector<ResDesc> blocks;
        bool has_up = false;
        ConvDesc up;
    };

    ConvDesc conv_in;
    LinearDesc time1, time2;
    std::vector<Encoder> enc;
    std::vector<ResDesc> mid;
    std::vector<Decoder> dec;
    NormDesc out_norm;
    ConvDesc out_conv;

    static std::pair<Plan, ParamLayout> build(const NetworkConfig& cfg) {
        Plan p;
        ParamLayout L;
        const int ted = cfg.time_embed_dim;
        p.time1 = add_linear(L, "time.fc1", ted, ted);
        p.time2 = add_linear(L, "time.fc2", ted, ted);
        p.conv_in = add_conv(L, "conv_in", NetworkConfig::input_channels, cfg.base_channels, 3, 1);

        int ch = cfg.base_channels;
        std::vector<int> skip_ch;
        for (int l = 0; l < cfg.levels(); ++l) {
            Encoder e;
            const int out = cfg.base_channels * cfg.channel_multipliers[l];
            for (int b = 0; b < cfg.residual_blocks_per_level; ++b) {
                e.blocks.push_back(add_res(L, "enc." + std::to_string(l) + ".res." + std::to_string(b),
                                           ch, out, ted));
                ch = out;
            }
            skip_ch.push_back(ch);
            if (l + 1 < cfg.levels()) {
                e.has_down = true;
                e.down = add_conv(L, "enc." + std::to_string(l) + ".down", ch, ch, 3, 2);
            }
            p.enc.push_back(std::move(e));
        }
        for (int b = 0; b < 2; ++b) p.mid.push_back(add_res(L, "mid.res." + std::to_string(b), ch, ch, ted));
        for (int l = cfg.levels() - 1; l >= 0; --l) {
            Decoder d;
            d.level = l;
            d.skip_channels = skip_ch[l];
            const int out = cfg.base_channels * cfg.channel_multipliers[l];
            int in = ch + skip_ch[l];
            for (int b = 0; b < cfg.residual_blocks_per_level; ++b) {
                d.blocks.push_back(add_res(L, "dec." + std::to_string(l) + ".res." + std::to_string(b),
                                           in, out, ted));
                in = out;
            }
            ch = out;
            if (l > 0) {
                d.has_up = true;
                d.up = add_conv(L, "dec." + std::to_string(l) + ".up", ch, ch, 3, 1);
            }
            p.dec.push_back(std::move(d));
        }
        p.out_norm = add_norm(L, "out.norm", ch);
        p.out_conv = add_conv(L, "out.conv", ch, NetworkConfig::output_channels, 3, 1);
        return {std::move(p), std::move(L)};
    }
};

// ---------------------------------------------------------------------------
// Kernels

namespace {

template <typename T>
struct Tensor {
    int c = 0, h = 0, w = 0;
    AlignedBuffer<T> d;

    Tensor() = default;
    Tensor(int c_, int h_, int w_) : c(c_), h(h_), w(w_), d(static_cast<std::size_t>(c_) * h_ * w_, T{}) {}
    std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
    T* ch(int i) { return d.data() + i * plane(); }
    const T* ch(int i) const { return d.data() + i * plane(); }
};

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

template <typename T>
RowMat<T> im2col(const Tensor<T>& x, int k, int stride, int oh, int ow) {
    const int pad = k / 2;
    RowMat<T> cols(static_cast<Eigen::Index>(x.c) * k * k, static_cast<Eigen::Index>(oh) * ow);
    for (int ci = 0; ci < x.c; ++ci) {
        const T* src = x.ch(ci);
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                T* row = cols.row((ci * k + ky) * k + kx).data();
                for (int oy = 0; oy < oh; ++oy) {
                    const int iy = oy * stride + ky - pad;
                    T* dst = row + oy * ow;
                    if (iy < 0 || iy >= x.h) {
                        std::fill(dst, dst + ow, T{});
                        continue;
                    }
                    for (int ox = 0; ox < ow; ++ox) {
                        const int ix = ox * stride + kx - pad;
                        dst[ox] = (ix < 0 || ix >= x.w) ? T{} : src[iy * x.w + ix];
                    }
                }
            }
        }
    }
    return cols;
}

template <typename T>
void col2im_add(const RowMat<T>& cols, int k, int stride, int oh, int ow, Tensor<T>& dx) {
    const int pad = k / 2;
    for (int ci = 0; ci < dx.c; ++ci) {
        T* dst = dx.ch(ci);
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                const T* row = cols.row((ci * k + ky) * k + kx).data();
                for (int oy = 0; oy < oh; ++oy) {
                    const int iy = oy * stride + ky - pad;
                    if (iy < 0 || iy >= dx.h) continue;
                    for (int ox = 0; ox < ow; ++ox) {
                        const int ix = ox * stride + kx - pad;
                        if (ix >= 0 && ix < dx.w) dst[iy * dx.w + ix] += row[oy * ow + ox];
                    }
                }
            }
        }
    }
}

int conv_out(int n, const ConvDesc& d) { return (n + 2 * (d.k / 2) - d.k) / d.stride + 1; }

template <typename T>
Tensor<T> conv_forward(const T* P, const ConvDesc& d, const Tensor<T>& x) {
    const int oh = conv_out(x.h, d), ow = conv_out(x.w, d);
    Tensor<T> y(d.cout, oh, ow);
    const Eigen::Index K = static_cast<Eigen::Index>(d.cin) * d.k * d.k;
    Eigen::Map<const RowMat<T>> W(P + d.w, d.cout, K);
    Eigen::Map<const Vec<T>> b(P + d.b, d.cout);
    Eigen::Map<RowMat<T>> Y(y.d.data(), d.cout, static_cast<Eigen::Index>(oh) * ow);
    if (d.k == 1 && d.stride == 1) {
        Eigen::Map<const RowMat<T>> X(x.d.data(), x.c, static_cast<Eigen::Index>(x.plane()));
        Y.noalias() = W * X;
    } else {
        Y.noalias() = W * im2col(x, d.k, d.stride, oh, ow);
    }
    Y.colwise() += b;
    return y;
}

// Accumulates weight/bias gradients into G; returns dx when `want_dx`.
template <typename T>
Tensor<T> conv_backward(const T* P, T* G, const ConvDesc& d, const Tensor<T>& x,
                        const Tensor<T>& dy, bool want_dx) {
    const int oh = dy.h, ow = dy.w;
    const Eigen::Index K = static_cast<Eigen::Index>(d.cin) * d.k * d.k;
    const Eigen::Index npix = static_cast<Eigen::Index>(oh) * ow;
    Eigen::Map<const RowMat<T>> W(P + d.w, d.cout, K);
    Eigen::Map<RowMat<T>> dW(G + d.w, d.cout, K);
    Eigen::Map<Vec<T>> db(G + d.b, d.cout);
    Eigen::Map<const RowMat<T>> dY(dy.d.data(), d.cout, npix);
    db += dY.rowwise().sum();
    Tensor<T> dx;
    if (d.k == 1 && d.stride == 1) {
        Eigen::Map<const RowMat<T>> X(x.d.data(), x.c, static_cast<Eigen::Index>(x.plane()));
        dW.noalias() += dY * X.transpose();
        if (want_dx) {
            dx = Tensor<T>(x.c, x.h, x.w);
            Eigen::Map<RowMat<T>> dX(dx.d.data(), x.c, static_cast<Eigen::Index>(x.plane()));
            dX.noalias() = W.transpose() * dY;
        }
        return dx;
    }
    const RowMat<T> cols = im2col(x, d.k, d.stride, oh, ow);
    dW.noalias() += dY * cols.transpose();
    if (want_dx) {
        dx = Tensor<T>(x.c, x.h, x.w);
        const RowMat<T> dcols = W.transpose() * dY;
        col2im_add(dcols, d.k, d.stride, oh, ow, dx);
    }
    return dx;
}

constexpr double kNormEps = 1e-5;

template <typename T>
struct NormTrace {
    AlignedBuffer<T> xhat;
    AlignedBuffer<T> inv_std;  // per group
};

template <typename T>
Tensor<T> norm_forward(const T* P, const NormDesc& d, const Tensor<T>& x, NormTrace<T>& tr) {
    Tensor<T> y(x.c, x.h, x.w);
    tr.xhat.assign(x.d.size(), T{});
    tr.inv_std.assign(d.groups, T{});
    const int cg = d.channels / d.groups;
    const std::size_t n = static_cast<std::size_t>(cg) * x.plane();
    for (int g = 0; g < d.groups; ++g) {
        const std::size_t base = static_cast<std::size_t>(g) * n;
        double sum = 0.0;
        for (std::size_t i = 0; i < n; ++i) sum += static_cast<double>(x.d[base + i]);
        const double mean = sum / static_cast<double>(n);
        double sq = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double c = static_cast<double>(x.d[base + i]) - mean;
            sq += c * c;
        }
        const T inv = static_cast<T>(1.0 / std::sqrt(sq / static_cast<double>(n) + kNormEps));
        tr.inv_std[g] = inv;
        for (std::size_t i = 0; i < n; ++i) {
            tr.xhat[base + i] = (x.d[base + i] - static_cast<T>(mean)) * inv;
        }
    }
    for (int c = 0; c < x.c; ++c) {
        const T gain = P[d.gain + c], bias = P[d.bias + c];
        const T* xh = tr.xhat.data() + c * x.plane();
        T* out = y.ch(c);
        for (std::size_t i = 0; i < x.plane(); ++i) out[i] = gain * xh[i] + bias;
    }
    return y;
}

template <typename T>
Tensor<T> norm_backward(const T* P, T* G, const NormDesc& d, const NormTrace<T>& tr,
                        const Tensor<T>& dy) {
    Tensor<T> dx(dy.c, dy.h, dy.w);
    const std::size_t plane = dy.plane();
    AlignedBuffer<T> dxhat(dy.d.size());
    for (int c = 0; c < dy.c; ++c) {
        const T gain = P[d.gain + c];
        const T* g = dy.ch(c);
        const T* xh = tr.xhat.data() + c * plane;
        T* dh = dxhat.data() + c * plane;
        T dgain{}, dbias{};
        for (std::size_t i = 0; i < plane; ++i) {
            dgain += g[i] * xh[i];
            dbias += g[i];
            dh[i] = g[i] * gain;
        }
        G[d.gain + c] += dgain;
        G[d.bias + c] += dbias;
    }
    const int cg = d.channels / d.groups;
    const std::size_t n = static_cast<std::size_t>(cg) * plane;
    for (int grp = 0; grp < d.groups; ++grp) {
        const std::size_t base = static_cast<std::size_t>(grp) * n;
        T s1{}, s2{};
        for (std::size_t i = 0; i < n; ++i) {
            s1 += dxhat[base + i];
            s2 += dxhat[base + i] * tr.xhat[base + i];
        }
        const T inv = tr.inv_std[grp];
        const T m = static_cast<T>(n);
        for (std::size_t i = 0; i < n; ++i) {
            dx.d[base + i] = inv / m * (m * dxhat[base + i] - s1 - tr.xhat[base + i] * s2);
        }
    }
    return dx;
}

template <typename T>
T sigmoid(T x) {
    return T(1) / (T(1) + std::exp(-x));
}

template <typename T>
AlignedBuffer<T> silu(const AlignedBuffer<T>& x) {
    AlignedBuffer<T> y(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] * sigmoid(x[i]);
    return y;
}

template <typename T>
Tensor<T> silu(const Tensor<T>& x) {
    Tensor<T> y(x.c, x.h, x.w);
    y.d = silu(x.d);
    return y;
}

// dy/dx scaled by upstream gradient, in place on `grad`.
template <typename T>
void silu_backward_inplace(const AlignedBuffer<T>& x, AlignedBuffer<T>& grad) {
    for (std::size_t i = 0; i < x.size(); ++i) {
        const T s = sigmoid(x[i]);
        grad[i] *= s * (T(1) + x[i] * (T(1) - s));
    }
}

template <typename T>
AlignedBuffer<T> linear_forward(const T* P, const LinearDesc& d, const AlignedBuffer<T>& x) {
    Eigen::Map<const RowMat<T>> W(P + d.w, d.out, d.in);
    Eigen::Map<const Vec<T>> b(P + d.b, d.out);
    Eigen::Map<const Vec<T>> X(x.data(), d.in);
    AlignedBuffer<T> y(d.out);
    Eigen::Map<Vec<T>> Y(y.data(), d.out);
    Y.noalias() = W * X + b;
    return y;
}

template <typename T>
void linear_backward(const T* P, T* G, const LinearDesc& d, const AlignedBuffer<T>& x,
                     const AlignedBuffer<T>& dy, AlignedBuffer<T>& dx_accum) {
    Eigen::Map<const RowMat<T>> W(P + d.w, d.out, d.in);
    Eigen::Map<RowMat<T>> dW(G + d.w, d.out, d.in);
    Eigen::Map<Vec<T>> db(G + d.b, d.out);
    Eigen::Map<const Vec<T>> X(x.data(), d.in);
    Eigen::Map<const Vec<T>> dY(dy.data(), d.out);
    dW.noalias() += dY * X.transpose();
    db += dY;
    Eigen::Map<Vec<T>> dX(dx_accum.data(), d.in);
    dX.noalias() += W.transpose() * dY;
}

template <typename T>
Tensor<T> upsample2(const Tensor<T>& x) {
    Tensor<T> y(x.c, x.h * 2, x.w * 2);
    for (int c = 0; c < x.c; ++c) {
        const T* s = x.ch(c);
        T* o = y.ch(c);
        for (int yy = 0; yy < y.h; ++yy)
            for (int xx = 0; xx < y.w; ++xx) o[yy * y.w + xx] = s[(yy / 2) * x.w + xx / 2];
    }
    return y;
}

template <typename T>
Tensor<T> upsample2_backward(const Tensor<T>& dy) {
    Tensor<T> dx(dy.c, dy.h / 2, dy.w / 2);
    for (int c = 0; c < dy.c; ++c) {
        const T* g = dy.ch(c);
        T* o = dx.ch(c);
        for (int yy = 0; yy < dy.h; ++yy)
            for (int xx = 0; xx < dy.w; ++xx) o[(yy / 2) * dx.w + xx / 2] += g[yy * dy.w + xx];
    }
    return dx;
}

template <typename T>
Tensor<T> concat(const Tensor<T>& a, const Tensor<T>& b) {
    Tensor<T> y(a.c + b.c, a.h, a.w);
    std::copy(a.d.begin(), a.d.end(), y.d.begin());
    std::copy(b.d.begin(), b.d.end(), y.d.begin() + static_cast<std::ptrdiff_t>(a.d.size()));
    return y;
}

template <typename T>
void add_inplace(Tensor<T>& a, const Tensor<T>& b) {
    for (std::size_t i = 0; i < a.d.size(); ++i) a.d[i] += b.d[i];
}

template <typename T>
struct ResTrace {
    Tensor<T> x;
    NormTrace<T> n1;
    Tensor<T> a1, h1;
    NormTrace<T> n2;
    Tensor<T> a2, h2;
};

template <typename T>
Tensor<T> res_forward(const T* P, const ResDesc& r, const Tensor<T>& x, const AlignedBuffer<T>& tact,
                      ResTrace<T>& tr) {
    tr.x = x;
    tr.a1 = norm_forward(P, r.norm1, x, tr.n1);
    tr.h1 = silu(tr.a1);
    Tensor<T> c1 = conv_forward(P, r.conv1, tr.h1);
    const AlignedBuffer<T> proj = linear_forward(P, r.temb, tact);
    for (int c = 0; c < c1.c; ++c) {
        T* p = c1.ch(c);
        for (std::size_t i = 0; i < c1.plane(); ++i) p[i] += proj[c];
    }
    tr.a2 = norm_forward(P, r.norm2, c1, tr.n2);
    tr.h2 = silu(tr.a2);
    Tensor<T> out = conv_forward(P, r.conv2, tr.h2);
    if (r.has_skip) {
        add_inplace(out, conv_forward(P, r.skip, x));
    } else {
        add_inplace(out, x);
    }
    return out;
}

template <typename T>
Tensor<T> res_backward(const T* P, T* G, const ResDesc& r, const ResTrace<T>& tr,
                       const AlignedBuffer<T>& tact, const Tensor<T>& dout, AlignedBuffer<T>& dtact) {
    Tensor<T> dh2 = conv_backward(P, G, r.conv2, tr.h2, dout, true);
    silu_backward_inplace(tr.a2.d, dh2.d);
    Tensor<T> dc1 = norm_backward(P, G, r.norm2, tr.n2, dh2);
    AlignedBuffer<T> dproj(dc1.c, T{});
    for (int c = 0; c < dc1.c; ++c) {
        const T* g = dc1.ch(c);
        T s{};
        for (std::size_t i = 0; i < dc1.plane(); ++i) s += g[i];
        dproj[c] = s;
    }
    linear_backward(P, G, r.temb, tact, dproj, dtact);
    Tensor<T> dh1 = conv_backward(P, G, r.conv1, tr.h1, dc1, true);
    silu_backward_inplace(tr.a1.d, dh1.d);
    Tensor<T> dx = norm_backward(P, G, r.norm1, tr.n1, dh1);
    if (r.has_skip) {
        add_inplace(dx, conv_backward(P, G, r.skip, tr.x, dout, true));
    } else {
        add_inplace(dx, dout);
    }
    return dx;
}

template <typename T>
struct Trace {
    AlignedBuffer<T> emb, t1, th, temb, tact;
    Tensor<T> input;
    std::vector<std::vector<ResTrace<T>>> enc;
    std::vector<Tensor<T>> down_in;
    std::vector<ResTrace<T>> mid;
    std::vector<std::vector<ResTrace<T>>> dec;
    std::vector<Tensor<T>> up_in;
    Tensor<T> out_in;
    NormTrace<T> out_n;
    Tensor<T> out_a, out_s;
};

template <typename T>
Tensor<T> to_chw(const ImageBuffer& img) {
    Tensor<T> t(img.channels(), img.height(), img.width());
    for (int y = 0; y < img.height(); ++y)
        for (int x = 0; x < img.width(); ++x)
            for (int c = 0; c < img.channels(); ++c)
                t.ch(c)[y * img.width() + x] = static_cast<T>(img.at(y, x, c));
    return t;
}

template <typename T>
ImageBuffer to_hwc(const Tensor<T>& t) {
    ImageBuffer img(t.h, t.w, t.c);
    for (int y = 0; y < t.h; ++y)
        for (int x = 0; x < t.w; ++x)
            for (int c = 0; c < t.c; ++c) img.at(y, x, c) = static_cast<float>(t.ch(c)[y * t.w + x]);
    return img;
}

template <typename T>
Tensor<T> run_forward(const UNet::Plan& plan, const T* P, const ImageBuffer& x7, int t, int ted,
                      Trace<T>& tr) {
    const auto emb = timestep_embedding(static_cast<double>(t), ted);
    tr.emb.assign(emb.begin(), emb.end());
    tr.t1 = linear_forward(P, plan.time1, tr.emb);
    tr.th = silu(tr.t1);
    tr.temb = linear_forward(P, plan.time2, tr.th);
    tr.tact = silu(tr.temb);

    tr.input = to_chw<T>(x7);
    Tensor<T> h = conv_forward(P, plan.conv_in, tr.input);
    std::vector<Tensor<T>> skips;
    tr.enc.resize(plan.enc.size());
    tr.down_in.resize(plan.enc.size());
    for (std::size_t l = 0; l < plan.enc.size(); ++l) {
        const auto& e = plan.enc[l];
        tr.enc[l].resize(e.blocks.size());
        for (std::size_t b = 0; b < e.blocks.size(); ++b) {
            h = res_forward(P, e.blocks[b], h, tr.tact, tr.enc[l][b]);
        }
        skips.push_back(h);
        if (e.has_down) {
            tr.down_in[l] = h;
            h = conv_forward(P, e.down, h);
        }
    }
    tr.mid.resize(plan.mid.size());
    for (std::size_t b = 0; b < plan.mid.size(); ++b) h = res_forward(P, plan.mid[b], h, tr.tact, tr.mid[b]);
    tr.dec.resize(plan.dec.size());
    tr.up_in.resize(plan.dec.size());
    for (std::size_t i = 0; i < plan.dec.size(); ++i) {
        const auto& d = plan.dec[i];
        h = concat(h, skips[d.level]);
        tr.dec[i].resize(d.blocks.size());
        for (std::size_t b = 0; b < d.blocks.size(); ++b) {
            h = res_forward(P, d.blocks[b], h, tr.tact, tr.dec[i][b]);
        }
        if (d.has_up) {
            tr.up_in[i] = upsample2(h);
            h = conv_forward(P, d.up, tr.up_in[i]);
        }
    }
    tr.out_a = norm_forward(P, plan.out_norm, h, tr.out_n);
    tr.out_s = silu(tr.out_a);
    return conv_forward(P, plan.out_conv, tr.out_s);
}

template <typename T>
void run_backward(const UNet::Plan& plan, const T* P, T* G, const Trace<T>& tr, const Tensor<T>& dy) {
    AlignedBuffer<T> dtact(tr.tact.size(), T{});
    Tensor<T> dh = conv_backward(P, G, plan.out_conv, tr.out_s, dy, true);
    silu_backward_inplace(tr.out_a.d, dh.d);
    dh = norm_backward(P, G, plan.out_norm, tr.out_n, dh);

    std::vector<Tensor<T>> dskips(plan.enc.size());
    for (std::size_t i = plan.dec.size(); i-- > 0;) {
        const auto& d = plan.dec[i];
        if (d.has_up) {
            dh = conv_backward(P, G, d.up, tr.up_in[i], dh, true);
            dh = upsample2_backward(dh);
        }
        for (std::size_t b = d.blocks.size(); b-- > 0;) {
            dh = res_backward(P, G, d.blocks[b], tr.dec[i][b], tr.tact, dh, dtact);
        }
        const int main_c = dh.c - d.skip_channels;
        Tensor<T> dmain(main_c, dh.h, dh.w), dskip(d.skip_channels, dh.h, dh.w);
        const auto split = static_cast<std::ptrdiff_t>(dmain.d.size());
        std::copy(dh.d.begin(), dh.d.begin() + split, dmain.d.begin());
        std::copy(dh.d.begin() + split, dh.d.end(), dskip.d.begin());
        dskips[d.level] = std::move(dskip);
        dh = std::move(dmain);
    }
    for (std::size_t b = plan.mid.size(); b-- > 0;) {
        dh = res_backward(P, G, plan.mid[b], tr.mid[b], tr.tact, dh, dtact);
    }
    for (std::size_t l = plan.enc.size(); l-- > 0;) {
        const auto& e = plan.enc[l];
        if (e.has_down) dh = conv_backward(P, G, e.down, tr.down_in[l], dh, true);
        add_inplace(dh, dskips[l]);
        for (std::size_t b = e.blocks.size(); b-- > 0;) {
            dh = res_backward(P, G, e.blocks[b], tr.enc[l][b], tr.tact, dh, dtact);
        }
    }
    conv_backward(P, G, plan.conv_in, tr.input, dh, false);

    silu_backward_inplace(tr.temb, dtact);
    AlignedBuffer<T> dth(tr.th.size(), T{});
    linear_backward(P, G, plan.time2, tr.th, dtact, dth);
    silu_backward_inplace(tr.t1, dth);
    AlignedBuffer<T> demb(tr.emb.size(), T{});
    linear_backward(P, G, plan.time1, tr.emb, dth, demb);
}

}  // namespace

// ---------------------------------------------------------------------------
// UNet

UNet::UNet(NetworkConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    auto [plan, layout] = Plan::build(cfg_);
    plan_ = std::make_unique<Plan>(std::move(plan));
    layout_ = std::make_shared<const ParamLayout>(std::move(layout));
}

UNet::~UNet() = default;
UNet::UNet(UNet&&) noexcept = default;
UNet& UNet::operator=(UNet&&) noexcept = default;

ParameterSet UNet::init_parameters(std::uint64_t seed) const {
    ParameterSet params(layout_);
    Rng rng(seed);
    for (const auto& e : layout_->entries()) {
        auto v = params.view(e.name);
        const bool is_gain = e.name.ends_with(".gain");
        const bool is_bias = e.name.ends_with(".bias");
        if (is_gain) {
            std::fill(v.begin(), v.end(), 1.0f);
        } else if (is_bias) {
            std::fill(v.begin(), v.end(), 0.0f);
        } else {
            std::size_t fan_in = 1;
            for (std::size_t i = 1; i < e.shape.size(); ++i) fan_in *= static_cast<std::size_t>(e.shape[i]);
            const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
            for (auto& x : v) x = static_cast<float>((2.0 * rng.uniform() - 1.0) * bound);
        }
    }
    return params;
}

void UNet::check_params(const ParamLayout& layout) const {
    if (!(layout == *layout_)) throw std::invalid_argument("parameter layout does not match network config");
}

template <typename T>
ImageBuffer UNet::forward(const BasicParameterSet<T>& params, const ImageBuffer& x7, int t) const {
    check_params(params.layout());
    if (x7.channels() != NetworkConfig::input_channels) {
        throw ShapeError("forward: expected 7 input channels, got " + x7.shape_string());
    }
    cfg_.check_input_extent(x7.height(), x7.width());
    Trace<T> tr;
    return to_hwc(run_forward(*plan_, params.flat().data(), x7, t, cfg_.time_embed_dim, tr));
}

template <typename T>
T UNet::mse_and_grad(const BasicParameterSet<T>& params, const ImageBuffer& x7, int t,
                     const ImageBuffer& target, T weight, std::span<T> grad) const {
    check_params(params.layout());
    if (x7.channels() != NetworkConfig::input_channels) {
        throw ShapeError("forward: expected 7 input channels, got " + x7.shape_string());
    }
    cfg_.check_input_extent(x7.height(), x7.width());
    if (target.height() != x7.height() || target.width() != x7.width() || target.channels() != 3) {
        throw ShapeError("mse_and_grad: target shape mismatch");
    }
    if (grad.size() != layout_->total()) throw std::invalid_argument("gradient buffer size mismatch");
    Trace<T> tr;
    const T* P = params.flat().data();
    Tensor<T> y = run_forward(*plan_, P, x7, t, cfg_.time_embed_dim, tr);
    const Tensor<T> tgt = to_chw<T>(target);
    Tensor<T> dy(y.c, y.h, y.w);
    const T n = static_cast<T>(y.d.size());
    T sum{};
    for (std::size_t i = 0; i < y.d.size(); ++i) {
        const T diff = y.d[i] - tgt.d[i];
        sum += diff * diff;
        dy.d[i] = weight * T(2) * diff / n;
    }
    // Accumulate through an aligned buffer so the caller's allocation cannot
    // change the summation order.
    AlignedBuffer<T> g(grad.size(), T{});
    run_backward(*plan_, P, g.data(), tr, dy);
    for (std::size_t i = 0; i < g.size(); ++i) grad[i] += g[i];
    return sum / n;
}

template ImageBuffer UNet::forward<float>(const BasicParameterSet<float>&, const ImageBuffer&, int) const;
template ImageBuffer UNet::forward<double>(const BasicParameterSet<double>&, const ImageBuffer&, int) const;
template float UNet::mse_and_grad<float>(const BasicParameterSet<float>&, const ImageBuffer&, int,
                                         const ImageBuffer&, float, std::span<float>) const;
template double UNet::mse_and_grad<double>(const BasicParameterSet<double>&, const ImageBuffer&, int,
                                           const ImageBuffer&, double, std::span<double>) const;

// ---------------------------------------------------------------------------

int norm_groups(int channels) {
    for (int g = std::min(8, channels / 2); g > 1; --g) {
        if (channels % g == 0) return g;
    }
    return 1;
}

ImageBuffer assemble_input(const ImageBuffer& x_t, const ConditionPair& cond) {
    if (x_t.channels() != 3) throw ShapeError("assemble_input: x_t must have 3 channels");
    if (cond.sketch) {
        require_same_extent(x_t, *cond.sketch, "assemble_input sketch");
        if (cond.sketch->channels() != 1) throw ShapeError("assemble_input: sketch must have 1 channel");
    }
    if (cond.stroke) {
        require_same_extent(x_t, *cond.stroke, "assemble_input stroke");
        if (cond.stroke->channels() != 3) throw ShapeError("assemble_input: stroke must have 3 channels");
    }
    ImageBuffer out(x_t.height(), x_t.width(), 7, kGrayFill);
    for (int y = 0; y < x_t.height(); ++y) {
        for (int x = 0; x < x_t.width(); ++x) {
            for (int c = 0; c < 3; ++c) out.at(y, x, c) = x_t.at(y, x, c);
            if (cond.sketch) out.at(y, x, 3) = cond.sketch->at(y, x, 0);
            if (cond.stroke) {
                for (int c = 0; c < 3; ++c) out.at(y, x, 4 + c) = cond.stroke->at(y, x, c);
            }
        }
    }
    return out;
}

}  // namespace sketchdiff
