#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "dpc/errors.hpp"
#include "dpc/mathfn.hpp"
#include "dpc/tensor.hpp"

namespace dpc {

/// Named weight with its gradient accumulator. Frozen parameters
/// (trainable == false) never receive gradient and are never stepped.
struct Parameter {
    std::string name;
    Tensor value;
    Tensor grad;
    bool trainable = true;

    Parameter() = default;
    Parameter(std::string n, Tensor v, bool train = true)
        : name(std::move(n)), value(std::move(v)), grad(value.shape), trainable(train) {}
};

struct Value {
    int id = -1;
};

/// Tape of executed primitive operations. Replaying it backward applies the
/// chain rule once per node in reverse creation order (creation order is a
/// topological order since every input must already exist).
class Graph {
public:
    struct Node {
        Tensor val;
        Tensor grad;  // allocated during backward, only where needed
        bool needs_grad = false;
        const char* op = "";
        Parameter* param = nullptr;
        std::vector<int> parents;
        std::function<void(Graph&, int)> backward;
    };

    std::vector<Node> nodes;

    Value leaf(Tensor t, bool needs_grad = false) {
        Node n;
        n.val = std::move(t);
        n.needs_grad = needs_grad;
        n.op = "leaf";
        nodes.push_back(std::move(n));
        return Value{static_cast<int>(nodes.size()) - 1};
    }

    Value param(Parameter& p) {
        Node n;
        n.val = p.value;
        n.needs_grad = p.trainable;
        n.op = "param";
        n.param = &p;
        nodes.push_back(std::move(n));
        return Value{static_cast<int>(nodes.size()) - 1};
    }

    /// Low-level node constructor; the op helpers below go through this.
    Value add_node(Tensor val, std::vector<int> parents, const char* op,
                   std::function<void(Graph&, int)> backward) {
        Node n;
        n.val = std::move(val);
        n.op = op;
        n.parents = std::move(parents);
        for (int p : n.parents)
            if (nodes[static_cast<std::size_t>(p)].needs_grad) n.needs_grad = true;
        if (n.needs_grad) n.backward = std::move(backward);
        nodes.push_back(std::move(n));
        return Value{static_cast<int>(nodes.size()) - 1};
    }

    const Tensor& val(Value v) const { return nodes[static_cast<std::size_t>(v.id)].val; }
    const Tensor& grad_of(Value v) const { return nodes[static_cast<std::size_t>(v.id)].grad; }

    Tensor& g(int id) { return nodes[static_cast<std::size_t>(id)].grad; }
    const Tensor& v(int id) const { return nodes[static_cast<std::size_t>(id)].val; }

    /// Reverse pass from a scalar loss. Gradients of trainable Parameters
    /// are accumulated into Parameter::grad (+=); leaves created with
    /// needs_grad keep theirs in grad_of().
    void backward(Value loss) {
        auto lid = static_cast<std::size_t>(loss.id);
        if (lid >= nodes.size()) throw InternalError("backward: bad loss id");
        if (nodes[lid].val.numel() != 1) throw InternalError("backward: loss must be a scalar");

        std::vector<char> needed(nodes.size(), 0);
        needed[lid] = 1;
        for (std::size_t i = lid + 1; i-- > 0;) {
            if (!needed[i] || !nodes[i].needs_grad) continue;
            for (int p : nodes[i].parents)
                if (nodes[static_cast<std::size_t>(p)].needs_grad)
                    needed[static_cast<std::size_t>(p)] = 1;
        }
        for (std::size_t i = 0; i <= lid; ++i)
            if (needed[i] && nodes[i].needs_grad) nodes[i].grad = Tensor(nodes[i].val.shape);

        if (!nodes[lid].needs_grad)
            return;  // loss does not depend on anything trainable
        nodes[lid].grad.data[0] = 1.0;

        for (std::size_t i = lid + 1; i-- > 0;) {
            if (!needed[i] || !nodes[i].needs_grad) continue;
            if (nodes[i].backward) nodes[i].backward(*this, static_cast<int>(i));
            if (nodes[i].param && nodes[i].param->trainable) {
                Parameter& p = *nodes[i].param;
                for (std::size_t k = 0; k < p.grad.data.size(); ++k)
                    p.grad.data[k] += nodes[i].grad.data[k];
            }
        }
    }

    /// Label of the first node whose forward value contains a non-finite
    /// entry, or empty if all values are finite.
    std::string first_non_finite() const {
        for (std::size_t i = 0; i < nodes.size(); ++i) {
            if (!nodes[i].val.all_finite()) {
                std::string who = nodes[i].op;
                if (nodes[i].param) who += " '" + nodes[i].param->name + "'";
                return who + " (node " + std::to_string(i) + ")";
            }
        }
        return {};
    }
};

// ---------------------------------------------------------------------------
// Elementwise and reduction ops
// ---------------------------------------------------------------------------

inline Value add(Graph& g, Value a, Value b) {
    require_same_shape(g.val(a), g.val(b), "add");
    Tensor out = g.val(a);
    const Tensor& bv = g.val(b);
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += bv.data[i];
    int pa = a.id, pb = b.id;
    return g.add_node(std::move(out), {pa, pb}, "add", [pa, pb](Graph& gr, int self) {
        const Tensor& go = gr.g(self);
        if (gr.nodes[pa].needs_grad)
            for (std::size_t i = 0; i < go.data.size(); ++i) gr.g(pa).data[i] += go.data[i];
        if (gr.nodes[pb].needs_grad)
            for (std::size_t i = 0; i < go.data.size(); ++i) gr.g(pb).data[i] += go.data[i];
    });
}

inline Value sub(Graph& g, Value a, Value b) {
    require_same_shape(g.val(a), g.val(b), "sub");
    Tensor out = g.val(a);
    const Tensor& bv = g.val(b);
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] -= bv.data[i];
    int pa = a.id, pb = b.id;
    return g.add_node(std::move(out), {pa, pb}, "sub", [pa, pb](Graph& gr, int self) {
        const Tensor& go = gr.g(self);
        if (gr.nodes[pa].needs_grad)
            for (std::size_t i = 0; i < go.data.size(); ++i) gr.g(pa).data[i] += go.data[i];
        if (gr.nodes[pb].needs_grad)
            for (std::size_t i = 0; i < go.data.size(); ++i) gr.g(pb).data[i] -= go.data[i];
    });
}

inline Value mul(Graph& g, Value a, Value b) {
    require_same_shape(g.val(a), g.val(b), "mul");
    Tensor out = g.val(a);
    const Tensor& bv = g.val(b);
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] *= bv.data[i];
    int pa = a.id, pb = b.id;
    return g.add_node(std::move(out), {pa, pb}, "mul", [pa, pb](Graph& gr, int self) {
        const Tensor& go = gr.g(self);
        const Tensor& av = gr.v(pa);
        const Tensor& bv2 = gr.v(pb);
        if (gr.nodes[pa].needs_grad)
            for (std::size_t i = 0; i < go.data.size(); ++i)
                gr.g(pa).data[i] += go.data[i] * bv2.data[i];
        if (gr.nodes[pb].needs_grad)
            for (std::size_t i = 0; i < go.data.size(); ++i)
                gr.g(pb).data[i] += go.data[i] * av.data[i];
    });
}

inline Value scale(Graph& g, Value a, double c) {
    Tensor out = g.val(a);
    for (double& v : out.data) v *= c;
    int pa = a.id;
    return g.add_node(std::move(out), {pa}, "scale", [pa, c](Graph& gr, int self) {
        const Tensor& go = gr.g(self);
        for (std::size_t i = 0; i < go.data.size(); ++i) gr.g(pa).data[i] += c * go.data[i];
    });
}

inline Value add_scalar(Graph& g, Value a, double c) {
    Tensor out = g.val(a);
    for (double& v : out.data) v += c;
    int pa = a.id;
    return g.add_node(std::move(out), {pa}, "add_scalar", [pa](Graph& gr, int self) {
        const Tensor& go = gr.g(self);
        for (std::size_t i = 0; i < go.data.size(); ++i) gr.g(pa).data[i] += go.data[i];
    });
}

inline Value sum_all(Graph& g, Value a) {
    double s = 0.0;
    for (double v : g.val(a).data) s += v;
    int pa = a.id;
    return g.add_node(Tensor::scalar(s), {pa}, "sum", [pa](Graph& gr, int self) {
        double go = gr.g(self).data[0];
        for (double& v : gr.g(pa).data) v += go;
    });
}

inline Value mean_all(Graph& g, Value a) {
    double s = 0.0;
    for (double v : g.val(a).data) s += v;
    double inv = 1.0 / static_cast<double>(g.val(a).numel());
    int pa = a.id;
    return g.add_node(Tensor::scalar(s * inv), {pa}, "mean", [pa, inv](Graph& gr, int self) {
        double go = gr.g(self).data[0] * inv;
        for (double& v : gr.g(pa).data) v += go;
    });
}

enum class Activation { kRelu, kSilu };

inline Value activation(Graph& g, Value a, Activation kind) {
    Tensor out = g.val(a);
    if (kind == Activation::kRelu) {
        for (double& v : out.data) v = v > 0.0 ? v : 0.0;
    } else {
        for (double& v : out.data) v = v * sigmoid_fn(v);
    }
    int pa = a.id;
    const char* tag = kind == Activation::kRelu ? "relu" : "silu";
    return g.add_node(std::move(out), {pa}, tag, [pa, kind](Graph& gr, int self) {
        const Tensor& go = gr.g(self);
        const Tensor& x = gr.v(pa);
        Tensor& gx = gr.g(pa);
        if (kind == Activation::kRelu) {
            for (std::size_t i = 0; i < go.data.size(); ++i)
                if (x.data[i] > 0.0) gx.data[i] += go.data[i];
        } else {
            for (std::size_t i = 0; i < go.data.size(); ++i) {
                double s = sigmoid_fn(x.data[i]);
                gx.data[i] += go.data[i] * s * (1.0 + x.data[i] * (1.0 - s));
            }
        }
    });
}

inline Value relu(Graph& g, Value a) { return activation(g, a, Activation::kRelu); }
inline Value silu(Graph& g, Value a) { return activation(g, a, Activation::kSilu); }

inline Value sigmoid(Graph& g, Value a) {
    Tensor out = g.val(a);
    for (double& v : out.data) v = sigmoid_fn(v);
    int pa = a.id;
    return g.add_node(std::move(out), {pa}, "sigmoid", [pa](Graph& gr, int self) {
        const Tensor& go = gr.g(self);
        const Tensor& y = gr.v(self);
        for (std::size_t i = 0; i < go.data.size(); ++i)
            gr.g(pa).data[i] += go.data[i] * y.data[i] * (1.0 - y.data[i]);
    });
}

inline Value softplus(Graph& g, Value a) {
    Tensor out = g.val(a);
    for (double& v : out.data) v = softplus_fn(v);
    int pa = a.id;
    return g.add_node(std::move(out), {pa}, "softplus", [pa](Graph& gr, int self) {
        const Tensor& go = gr.g(self);
        const Tensor& x = gr.v(pa);
        for (std::size_t i = 0; i < go.data.size(); ++i)
            gr.g(pa).data[i] += go.data[i] * sigmoid_fn(x.data[i]);
    });
}

/// mean((a-b)^2); the distortion workhorse.
inline Value mse(Graph& g, Value a, Value b) {
    Value d = sub(g, a, b);
    return mean_all(g, mul(g, d, d));
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

inline Value concat_channels(Graph& g, Value a, Value b) {
    const Tensor& av = g.val(a);
    const Tensor& bv = g.val(b);
    if (av.rank() != 4 || bv.rank() != 4)
        throw DataError("concat_channels: expected rank-4 tensors");
    if (av.dim(0) != bv.dim(0) || av.dim(2) != bv.dim(2) || av.dim(3) != bv.dim(3))
        throw DataError("concat_channels: mismatched batch or spatial dims " + av.shape_str() +
                        " vs " + bv.shape_str());
    int B = av.dim(0), Ca = av.dim(1), Cb = bv.dim(1), H = av.dim(2), W = av.dim(3);
    std::size_t plane = static_cast<std::size_t>(H) * W;
    Tensor out({B, Ca + Cb, H, W});
    for (int bi = 0; bi < B; ++bi) {
        std::copy_n(av.ptr() + static_cast<std::size_t>(bi) * Ca * plane, Ca * plane,
                    out.ptr() + static_cast<std::size_t>(bi) * (Ca + Cb) * plane);
        std::copy_n(bv.ptr() + static_cast<std::size_t>(bi) * Cb * plane, Cb * plane,
                    out.ptr() + (static_cast<std::size_t>(bi) * (Ca + Cb) + Ca) * plane);
    }
    int pa = a.id, pb = b.id;
    return g.add_node(std::move(out), {pa, pb}, "concat",
                      [pa, pb, B, Ca, Cb, plane](Graph& gr, int self) {
                          const Tensor& go = gr.g(self);
                          for (int bi = 0; bi < B; ++bi) {
                              const double* src =
                                  go.ptr() + static_cast<std::size_t>(bi) * (Ca + Cb) * plane;
                              if (gr.nodes[pa].needs_grad) {
                                  double* dst = gr.g(pa).ptr() +
                                                static_cast<std::size_t>(bi) * Ca * plane;
                                  for (std::size_t i = 0; i < Ca * plane; ++i) dst[i] += src[i];
                              }
                              if (gr.nodes[pb].needs_grad) {
                                  double* dst = gr.g(pb).ptr() +
                                                static_cast<std::size_t>(bi) * Cb * plane;
                                  for (std::size_t i = 0; i < Cb * plane; ++i)
                                      dst[i] += src[Ca * plane + i];
                              }
                          }
                      });
}

inline Value slice_channels(Graph& g, Value a, int c0, int c1) {
    const Tensor& av = g.val(a);
    if (av.rank() != 4) throw DataError("slice_channels: expected rank-4 tensor");
    int B = av.dim(0), C = av.dim(1), H = av.dim(2), W = av.dim(3);
    if (c0 < 0 || c1 > C || c0 >= c1) throw DataError("slice_channels: bad channel range");
    std::size_t plane = static_cast<std::size_t>(H) * W;
    int Cs = c1 - c0;
    Tensor out({B, Cs, H, W});
    for (int bi = 0; bi < B; ++bi)
        std::copy_n(av.ptr() + (static_cast<std::size_t>(bi) * C + c0) * plane, Cs * plane,
                    out.ptr() + static_cast<std::size_t>(bi) * Cs * plane);
    int pa = a.id;
    return g.add_node(std::move(out), {pa}, "slice",
                      [pa, B, C, c0, Cs, plane](Graph& gr, int self) {
                          const Tensor& go = gr.g(self);
                          for (int bi = 0; bi < B; ++bi) {
                              const double* src =
                                  go.ptr() + static_cast<std::size_t>(bi) * Cs * plane;
                              double* dst =
                                  gr.g(pa).ptr() + (static_cast<std::size_t>(bi) * C + c0) * plane;
                              for (std::size_t i = 0; i < Cs * plane; ++i) dst[i] += src[i];
                          }
                      });
}

// ---------------------------------------------------------------------------
// Convolutions
// ---------------------------------------------------------------------------

namespace conv_detail {

inline void check_conv_args(const Tensor& x, const Tensor& w, const Tensor& b, int stride,
                            int pad, bool transpose) {
    if (x.rank() != 4) throw DataError("conv2d: input must be [B,C,H,W], got " + x.shape_str());
    if (w.rank() != 4) throw DataError("conv2d: weight must be rank 4, got " + w.shape_str());
    if (b.rank() != 1) throw DataError("conv2d: bias must be rank 1, got " + b.shape_str());
    if (stride != 1 && stride != 2)
        throw DataError("conv2d: stride must be 1 or 2, got " + std::to_string(stride));
    if (pad < 0) throw DataError("conv2d: negative padding");
    if (w.dim(2) != w.dim(3)) throw DataError("conv2d: kernel must be square");
    if (!transpose) {
        if (w.dim(2) % 2 == 0)
            throw DataError("conv2d: kernel size must be odd, got " + std::to_string(w.dim(2)));
        if (x.dim(1) != w.dim(1))
            throw DataError("conv2d: input channels " + std::to_string(x.dim(1)) +
                            " != weight in-channels " + std::to_string(w.dim(1)));
        if (b.dim(0) != w.dim(0))
            throw DataError("conv2d: bias length " + std::to_string(b.dim(0)) +
                            " != out-channels " + std::to_string(w.dim(0)));
    } else {
        if (x.dim(1) != w.dim(0))
            throw DataError("conv2d_transpose: input channels " + std::to_string(x.dim(1)) +
                            " != weight in-channels " + std::to_string(w.dim(0)));
        if (b.dim(0) != w.dim(1))
            throw DataError("conv2d_transpose: bias length " + std::to_string(b.dim(0)) +
                            " != out-channels " + std::to_string(w.dim(1)));
    }
}

/// out[b,co,oy,ox] += sum_{ci,ky,kx} w[co,ci,ky,kx] * in[b,ci,oy*s+ky-p,ox*s+kx-p]
inline void conv_forward(const Tensor& x, const Tensor& w, const Tensor& b, int s, int p,
                         Tensor& out) {
    int B = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
    int Co = w.dim(0), k = w.dim(2);
    int Ho = out.dim(2), Wo = out.dim(3);
    for (int bi = 0; bi < B; ++bi)
        for (int co = 0; co < Co; ++co) {
            double* op = out.ptr() + ((static_cast<std::size_t>(bi) * Co + co) * Ho) * Wo;
            double bias = b.data[static_cast<std::size_t>(co)];
            for (int i = 0; i < Ho * Wo; ++i) op[i] = bias;
            for (int ci = 0; ci < Ci; ++ci) {
                const double* ip = x.ptr() + ((static_cast<std::size_t>(bi) * Ci + ci) * H) * W;
                const double* wp =
                    w.ptr() + ((static_cast<std::size_t>(co) * Ci + ci) * k) * k;
                for (int ky = 0; ky < k; ++ky)
                    for (int kx = 0; kx < k; ++kx) {
                        double wv = wp[ky * k + kx];
                        int ox_lo = kx >= p ? 0 : (p - kx + s - 1) / s;
                        int ox_hi = std::min(Wo - 1, (W - 1 - kx + p) / s);
                        for (int oy = 0; oy < Ho; ++oy) {
                            int iy = oy * s + ky - p;
                            if (iy < 0 || iy >= H) continue;
                            const double* irow = ip + static_cast<std::size_t>(iy) * W;
                            double* orow = op + static_cast<std::size_t>(oy) * Wo;
                            if (s == 1) {
                                int off = kx - p;
                                for (int ox = ox_lo; ox <= ox_hi; ++ox)
                                    orow[ox] += wv * irow[ox + off];
                            } else {
                                for (int ox = ox_lo; ox <= ox_hi; ++ox)
                                    orow[ox] += wv * irow[ox * 2 + kx - p];
                            }
                        }
                    }
            }
        }
}

/// Gradients of conv_forward. Any of gx/gw/gb may be null.
inline void conv_backward(const Tensor& x, const Tensor& w, int s, int p, const Tensor& go,
                          Tensor* gx, Tensor* gw, Tensor* gb) {
    int B = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
    int Co = w.dim(0), k = w.dim(2);
    int Ho = go.dim(2), Wo = go.dim(3);
    if (gb) {
        for (int bi = 0; bi < B; ++bi)
            for (int co = 0; co < Co; ++co) {
                const double* gp =
                    go.ptr() + ((static_cast<std::size_t>(bi) * Co + co) * Ho) * Wo;
                double acc = 0.0;
                for (int i = 0; i < Ho * Wo; ++i) acc += gp[i];
                gb->data[static_cast<std::size_t>(co)] += acc;
            }
    }
    for (int bi = 0; bi < B; ++bi)
        for (int co = 0; co < Co; ++co) {
            const double* gp = go.ptr() + ((static_cast<std::size_t>(bi) * Co + co) * Ho) * Wo;
            for (int ci = 0; ci < Ci; ++ci) {
                const double* ip = x.ptr() + ((static_cast<std::size_t>(bi) * Ci + ci) * H) * W;
                double* gxp =
                    gx ? gx->ptr() + ((static_cast<std::size_t>(bi) * Ci + ci) * H) * W : nullptr;
                const double* wp = w.ptr() + ((static_cast<std::size_t>(co) * Ci + ci) * k) * k;
                double* gwp =
                    gw ? gw->ptr() + ((static_cast<std::size_t>(co) * Ci + ci) * k) * k : nullptr;
                for (int ky = 0; ky < k; ++ky)
                    for (int kx = 0; kx < k; ++kx) {
                        double wv = wp[ky * k + kx];
                        double wacc = 0.0;
                        int ox_lo = kx >= p ? 0 : (p - kx + s - 1) / s;
                        int ox_hi = std::min(Wo - 1, (W - 1 - kx + p) / s);
                        for (int oy = 0; oy < Ho; ++oy) {
                            int iy = oy * s + ky - p;
                            if (iy < 0 || iy >= H) continue;
                            const double* irow = ip + static_cast<std::size_t>(iy) * W;
                            const double* grow = gp + static_cast<std::size_t>(oy) * Wo;
                            if (gw) {
                                if (s == 1) {
                                    int off = kx - p;
                                    for (int ox = ox_lo; ox <= ox_hi; ++ox)
                                        wacc += grow[ox] * irow[ox + off];
                                } else {
                                    for (int ox = ox_lo; ox <= ox_hi; ++ox)
                                        wacc += grow[ox] * irow[ox * 2 + kx - p];
                                }
                            }
                            if (gx) {
                                double* gxrow = gxp + static_cast<std::size_t>(iy) * W;
                                if (s == 1) {
                                    int off = kx - p;
                                    for (int ox = ox_lo; ox <= ox_hi; ++ox)
                                        gxrow[ox + off] += grow[ox] * wv;
                                } else {
                                    for (int ox = ox_lo; ox <= ox_hi; ++ox)
                                        gxrow[ox * 2 + kx - p] += grow[ox] * wv;
                                }
                            }
                        }
                        if (gw) gwp[ky * k + kx] += wacc;
                    }
            }
        }
}

/// out[b,co,iy*s+ky-p,ix*s+kx-p] += w[ci,co,ky,kx] * in[b,ci,iy,ix]
inline void tconv_forward(const Tensor& x, const Tensor& w, const Tensor& b, int s, int p,
                          Tensor& out) {
    int B = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
    int Co = w.dim(1), k = w.dim(2);
    int Ho = out.dim(2), Wo = out.dim(3);
    for (int bi = 0; bi < B; ++bi)
        for (int co = 0; co < Co; ++co) {
            double* op = out.ptr() + ((static_cast<std::size_t>(bi) * Co + co) * Ho) * Wo;
            double bias = b.data[static_cast<std::size_t>(co)];
            for (int i = 0; i < Ho * Wo; ++i) op[i] = bias;
        }
    for (int bi = 0; bi < B; ++bi)
        for (int ci = 0; ci < Ci; ++ci) {
            const double* ip = x.ptr() + ((static_cast<std::size_t>(bi) * Ci + ci) * H) * W;
            for (int co = 0; co < Co; ++co) {
                double* op = out.ptr() + ((static_cast<std::size_t>(bi) * Co + co) * Ho) * Wo;
                const double* wp = w.ptr() + ((static_cast<std::size_t>(ci) * Co + co) * k) * k;
                for (int ky = 0; ky < k; ++ky)
                    for (int kx = 0; kx < k; ++kx) {
                        double wv = wp[ky * k + kx];
                        int ix_lo = kx >= p ? 0 : (p - kx + s - 1) / s;
                        int ix_hi = std::min(W - 1, (Wo - 1 - kx + p) / s);
                        for (int iy = 0; iy < H; ++iy) {
                            int oy = iy * s + ky - p;
                            if (oy < 0 || oy >= Ho) continue;
                            const double* irow = ip + static_cast<std::size_t>(iy) * W;
                            double* orow = op + static_cast<std::size_t>(oy) * Wo;
                            if (s == 1) {
                                int off = kx - p;
                                for (int ix = ix_lo; ix <= ix_hi; ++ix)
                                    orow[ix + off] += wv * irow[ix];
                            } else {
                                for (int ix = ix_lo; ix <= ix_hi; ++ix)
                                    orow[ix * 2 + kx - p] += wv * irow[ix];
                            }
                        }
                    }
            }
        }
}

inline void tconv_backward(const Tensor& x, const Tensor& w, int s, int p, const Tensor& go,
                           Tensor* gx, Tensor* gw, Tensor* gb) {
    int B = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
    int Co = w.dim(1), k = w.dim(2);
    int Ho = go.dim(2), Wo = go.dim(3);
    if (gb) {
        for (int bi = 0; bi < B; ++bi)
            for (int co = 0; co < Co; ++co) {
                const double* gp =
                    go.ptr() + ((static_cast<std::size_t>(bi) * Co + co) * Ho) * Wo;
                double acc = 0.0;
                for (int i = 0; i < Ho * Wo; ++i) acc += gp[i];
                gb->data[static_cast<std::size_t>(co)] += acc;
            }
    }
    for (int bi = 0; bi < B; ++bi)
        for (int ci = 0; ci < Ci; ++ci) {
            const double* ip = x.ptr() + ((static_cast<std::size_t>(bi) * Ci + ci) * H) * W;
            double* gxp =
                gx ? gx->ptr() + ((static_cast<std::size_t>(bi) * Ci + ci) * H) * W : nullptr;
            for (int co = 0; co < Co; ++co) {
                const double* gp = go.ptr() + ((static_cast<std::size_t>(bi) * Co + co) * Ho) * Wo;
                const double* wp = w.ptr() + ((static_cast<std::size_t>(ci) * Co + co) * k) * k;
                double* gwp =
                    gw ? gw->ptr() + ((static_cast<std::size_t>(ci) * Co + co) * k) * k : nullptr;
                for (int ky = 0; ky < k; ++ky)
                    for (int kx = 0; kx < k; ++kx) {
                        double wv = wp[ky * k + kx];
                        double wacc = 0.0;
                        int ix_lo = kx >= p ? 0 : (p - kx + s - 1) / s;
                        int ix_hi = std::min(W - 1, (Wo - 1 - kx + p) / s);
                        for (int iy = 0; iy < H; ++iy) {
                            int oy = iy * s + ky - p;
                            if (oy < 0 || oy >= Ho) continue;
                            const double* irow = ip + static_cast<std::size_t>(iy) * W;
                            const double* grow = gp + static_cast<std::size_t>(oy) * Wo;
                            double* gxrow =
                                gxp ? gxp + static_cast<std::size_t>(iy) * W : nullptr;
                            if (s == 1) {
                                int off = kx - p;
                                if (gw)
                                    for (int ix = ix_lo; ix <= ix_hi; ++ix)
                                        wacc += grow[ix + off] * irow[ix];
                                if (gx)
                                    for (int ix = ix_lo; ix <= ix_hi; ++ix)
                                        gxrow[ix] += grow[ix + off] * wv;
                            } else {
                                if (gw)
                                    for (int ix = ix_lo; ix <= ix_hi; ++ix)
                                        wacc += grow[ix * 2 + kx - p] * irow[ix];
                                if (gx)
                                    for (int ix = ix_lo; ix <= ix_hi; ++ix)
                                        gxrow[ix] += grow[ix * 2 + kx - p] * wv;
                            }
                        }
                        if (gw) gwp[ky * k + kx] += wacc;
                    }
            }
        }
}

}  // namespace conv_detail

/// Cross-correlation with bias. x: [B,Ci,H,W], w: [Co,Ci,k,k], b: [Co].
inline Value conv2d(Graph& g, Value x, Value w, Value b, int stride, int pad) {
    const Tensor& xv = g.val(x);
    const Tensor& wv = g.val(w);
    const Tensor& bv = g.val(b);
    conv_detail::check_conv_args(xv, wv, bv, stride, pad, false);
    int H = xv.dim(2), W = xv.dim(3), k = wv.dim(2);
    int hn = H + 2 * pad - k, wn = W + 2 * pad - k;
    if (hn < 0 || wn < 0)
        throw DataError("conv2d: spatial dims " + xv.shape_str() + " smaller than kernel k=" +
                        std::to_string(k) + " with pad=" + std::to_string(pad));
    int Ho = hn / stride + 1, Wo = wn / stride + 1;
    Tensor out({xv.dim(0), wv.dim(0), Ho, Wo});
    conv_detail::conv_forward(xv, wv, bv, stride, pad, out);
    int px = x.id, pw = w.id, pb = b.id;
    return g.add_node(std::move(out), {px, pw, pb}, "conv2d",
                      [px, pw, pb, stride, pad](Graph& gr, int self) {
                          conv_detail::conv_backward(
                              gr.v(px), gr.v(pw), stride, pad, gr.g(self),
                              gr.nodes[px].needs_grad ? &gr.g(px) : nullptr,
                              gr.nodes[pw].needs_grad ? &gr.g(pw) : nullptr,
                              gr.nodes[pb].needs_grad ? &gr.g(pb) : nullptr);
                      });
}

/// Adjoint of conv2d's linear map. x: [B,Ci,H,W], w: [Ci,Co,k,k], b: [Co].
/// Output spatial size is (H-1)*stride - 2*pad + k.
inline Value conv2d_transpose(Graph& g, Value x, Value w, Value b, int stride, int pad) {
    const Tensor& xv = g.val(x);
    const Tensor& wv = g.val(w);
    const Tensor& bv = g.val(b);
    conv_detail::check_conv_args(xv, wv, bv, stride, pad, true);
    int H = xv.dim(2), W = xv.dim(3), k = wv.dim(2);
    int Ho = (H - 1) * stride - 2 * pad + k;
    int Wo = (W - 1) * stride - 2 * pad + k;
    if (Ho < 1 || Wo < 1) throw DataError("conv2d_transpose: empty output for " + xv.shape_str());
    Tensor out({xv.dim(0), wv.dim(1), Ho, Wo});
    conv_detail::tconv_forward(xv, wv, bv, stride, pad, out);
    int px = x.id, pw = w.id, pb = b.id;
    return g.add_node(std::move(out), {px, pw, pb}, "conv2d_transpose",
                      [px, pw, pb, stride, pad](Graph& gr, int self) {
                          conv_detail::tconv_backward(
                              gr.v(px), gr.v(pw), stride, pad, gr.g(self),
                              gr.nodes[px].needs_grad ? &gr.g(px) : nullptr,
                              gr.nodes[pw].needs_grad ? &gr.g(pw) : nullptr,
                              gr.nodes[pb].needs_grad ? &gr.g(pb) : nullptr);
                      });
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

/// Per-group zero-mean unit-variance over (C/groups, H, W), then per-channel
/// affine. eps = 1e-5.
inline Value group_norm(Graph& g, Value x, Value gamma, Value beta, int groups) {
    constexpr double kEps = 1e-5;
    const Tensor& xv = g.val(x);
    if (xv.rank() != 4) throw DataError("group_norm: expected [B,C,H,W]");
    int B = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    if (groups < 1 || C % groups != 0)
        throw DataError("group_norm: channels " + std::to_string(C) + " not divisible by groups " +
                        std::to_string(groups));
    const Tensor& gv = g.val(gamma);
    const Tensor& bv = g.val(beta);
    if (gv.rank() != 1 || gv.dim(0) != C || bv.rank() != 1 || bv.dim(0) != C)
        throw DataError("group_norm: scale/shift must be [C]");
    int cg = C / groups;
    std::size_t plane = static_cast<std::size_t>(H) * W;
    std::size_t gsize = static_cast<std::size_t>(cg) * plane;
    Tensor out(xv.shape);
    for (int bi = 0; bi < B; ++bi)
        for (int gi = 0; gi < groups; ++gi) {
            const double* xp =
                xv.ptr() + (static_cast<std::size_t>(bi) * C + gi * cg) * plane;
            double m = 0.0;
            for (std::size_t i = 0; i < gsize; ++i) m += xp[i];
            m /= static_cast<double>(gsize);
            double var = 0.0;
            for (std::size_t i = 0; i < gsize; ++i) {
                double d = xp[i] - m;
                var += d * d;
            }
            var /= static_cast<double>(gsize);
            double inv = 1.0 / std::sqrt(var + kEps);
            double* op = out.ptr() + (static_cast<std::size_t>(bi) * C + gi * cg) * plane;
            for (int c = 0; c < cg; ++c) {
                double ga = gv.data[static_cast<std::size_t>(gi * cg + c)];
                double be = bv.data[static_cast<std::size_t>(gi * cg + c)];
                for (std::size_t i = 0; i < plane; ++i)
                    op[c * plane + i] = ga * (xp[c * plane + i] - m) * inv + be;
            }
        }
    int px = x.id, pg = gamma.id, pb = beta.id;
    return g.add_node(
        std::move(out), {px, pg, pb}, "group_norm", [px, pg, pb, groups](Graph& gr, int self) {
            const Tensor& xv2 = gr.v(px);
            const Tensor& gv2 = gr.v(pg);
            const Tensor& go = gr.g(self);
            int B2 = xv2.dim(0), C2 = xv2.dim(1), H2 = xv2.dim(2), W2 = xv2.dim(3);
            int cg2 = C2 / groups;
            std::size_t plane2 = static_cast<std::size_t>(H2) * W2;
            std::size_t gsize2 = static_cast<std::size_t>(cg2) * plane2;
            double invn = 1.0 / static_cast<double>(gsize2);
            for (int bi = 0; bi < B2; ++bi)
                for (int gi = 0; gi < groups; ++gi) {
                    std::size_t base = (static_cast<std::size_t>(bi) * C2 + gi * cg2) * plane2;
                    const double* xp = xv2.ptr() + base;
                    const double* gop = go.ptr() + base;
                    double m = 0.0;
                    for (std::size_t i = 0; i < gsize2; ++i) m += xp[i];
                    m *= invn;
                    double var = 0.0;
                    for (std::size_t i = 0; i < gsize2; ++i) {
                        double d = xp[i] - m;
                        var += d * d;
                    }
                    var *= invn;
                    double inv = 1.0 / std::sqrt(var + kEps);
                    // dxhat_i = go_i * gamma_c; accumulate the two reduction terms
                    double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
                    for (int c = 0; c < cg2; ++c) {
                        double ga = gv2.data[static_cast<std::size_t>(gi * cg2 + c)];
                        for (std::size_t i = 0; i < plane2; ++i) {
                            double dxh = gop[c * plane2 + i] * ga;
                            double xh = (xp[c * plane2 + i] - m) * inv;
                            sum_dxhat += dxh;
                            sum_dxhat_xhat += dxh * xh;
                        }
                    }
                    if (gr.nodes[px].needs_grad) {
                        double* gxp = gr.g(px).ptr() + base;
                        for (int c = 0; c < cg2; ++c) {
                            double ga = gv2.data[static_cast<std::size_t>(gi * cg2 + c)];
                            for (std::size_t i = 0; i < plane2; ++i) {
                                double dxh = gop[c * plane2 + i] * ga;
                                double xh = (xp[c * plane2 + i] - m) * inv;
                                gxp[c * plane2 + i] +=
                                    inv * (dxh - invn * sum_dxhat - invn * xh * sum_dxhat_xhat);
                            }
                        }
                    }
                    if (gr.nodes[pg].needs_grad || gr.nodes[pb].needs_grad) {
                        for (int c = 0; c < cg2; ++c) {
                            double dg = 0.0, db = 0.0;
                            for (std::size_t i = 0; i < plane2; ++i) {
                                double xh = (xp[c * plane2 + i] - m) * inv;
                                dg += gop[c * plane2 + i] * xh;
                                db += gop[c * plane2 + i];
                            }
                            if (gr.nodes[pg].needs_grad)
                                gr.g(pg).data[static_cast<std::size_t>(gi * cg2 + c)] += dg;
                            if (gr.nodes[pb].needs_grad)
                                gr.g(pb).data[static_cast<std::size_t>(gi * cg2 + c)] += db;
                        }
                    }
                }
        });
}

// ---------------------------------------------------------------------------
// Attention
// ---------------------------------------------------------------------------

namespace attn_detail {

// row-major C x P matrices stored as flat vectors
inline void matmul(const double* a, const double* b, double* out, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        double* orow = out + static_cast<std::size_t>(i) * n;
        for (int j = 0; j < n; ++j) orow[j] = 0.0;
        const double* arow = a + static_cast<std::size_t>(i) * k;
        for (int kk = 0; kk < k; ++kk) {
            double av = arow[kk];
            const double* brow = b + static_cast<std::size_t>(kk) * n;
            for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
}

// out += a^T * b  (a: k x m, b: k x n, out: m x n)
inline void matmul_at_b_acc(const double* a, const double* b, double* out, int k, int m, int n) {
    for (int kk = 0; kk < k; ++kk) {
        const double* arow = a + static_cast<std::size_t>(kk) * m;
        const double* brow = b + static_cast<std::size_t>(kk) * n;
        for (int i = 0; i < m; ++i) {
            double av = arow[i];
            double* orow = out + static_cast<std::size_t>(i) * n;
            for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
}

// out += a * b^T  (a: m x k, b: n x k, out: m x n)
inline void matmul_a_bt_acc(const double* a, const double* b, double* out, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* arow = a + static_cast<std::size_t>(i) * k;
        double* orow = out + static_cast<std::size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const double* brow = b + static_cast<std::size_t>(j) * k;
            double acc = 0.0;
            for (int kk = 0; kk < k; ++kk) acc += arow[kk] * brow[kk];
            orow[j] += acc;
        }
    }
}

inline void softmax_rows(double* s, int rows, int cols) {
    for (int i = 0; i < rows; ++i) {
        double* row = s + static_cast<std::size_t>(i) * cols;
        double mx = row[0];
        for (int j = 1; j < cols; ++j) mx = std::max(mx, row[j]);
        double tot = 0.0;
        for (int j = 0; j < cols; ++j) {
            row[j] = std::exp(row[j] - mx);
            tot += row[j];
        }
        double inv = 1.0 / tot;
        for (int j = 0; j < cols; ++j) row[j] *= inv;
    }
}

}  // namespace attn_detail

/// Spatial self-attention with residual: out = x + Wo * softmax(Q^T K / sqrt(C)) applied to V,
/// over the H*W positions of each batch element. All projections are C x C.
inline Value self_attention(Graph& g, Value x, Value wq, Value wk, Value wv, Value wo) {
    const Tensor& xv = g.val(x);
    if (xv.rank() != 4) throw DataError("self_attention: expected [B,C,H,W]");
    int B = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    for (Value m : {wq, wk, wv, wo}) {
        const Tensor& t = g.val(m);
        if (t.rank() != 2 || t.dim(0) != C || t.dim(1) != C)
            throw DataError("self_attention: projection must be [C,C], got " + t.shape_str());
    }
    int P = H * W;
    double inv_sqrt_c = 1.0 / std::sqrt(static_cast<double>(C));
    std::size_t cp = static_cast<std::size_t>(C) * P;
    Tensor out(xv.shape);
    std::vector<double> Q(cp), K(cp), V(cp), S(static_cast<std::size_t>(P) * P), O(cp), Y(cp);
    using namespace attn_detail;
    for (int bi = 0; bi < B; ++bi) {
        const double* X = xv.ptr() + static_cast<std::size_t>(bi) * cp;
        matmul(g.val(wq).ptr(), X, Q.data(), C, C, P);
        matmul(g.val(wk).ptr(), X, K.data(), C, C, P);
        matmul(g.val(wv).ptr(), X, V.data(), C, C, P);
        for (auto& s : S) s = 0.0;
        matmul_at_b_acc(Q.data(), K.data(), S.data(), C, P, P);
        for (auto& s : S) s *= inv_sqrt_c;
        softmax_rows(S.data(), P, P);
        for (auto& o : O) o = 0.0;
        matmul_a_bt_acc(V.data(), S.data(), O.data(), C, P, P);  // O = V * A^T
        matmul(g.val(wo).ptr(), O.data(), Y.data(), C, C, P);
        double* op = out.ptr() + static_cast<std::size_t>(bi) * cp;
        for (std::size_t i = 0; i < cp; ++i) op[i] = X[i] + Y[i];
    }
    int px = x.id, pq = wq.id, pk = wk.id, pv = wv.id, po = wo.id;
    return g.add_node(std::move(out), {px, pq, pk, pv, po}, "self_attention", [=](Graph& gr,
                                                                                  int self) {
        const Tensor& xv2 = gr.v(px);
        int B2 = xv2.dim(0), C2 = xv2.dim(1), H2 = xv2.dim(2), W2 = xv2.dim(3);
        int P2 = H2 * W2;
        std::size_t cp2 = static_cast<std::size_t>(C2) * P2;
        double isc = 1.0 / std::sqrt(static_cast<double>(C2));
        const Tensor& go = gr.g(self);
        std::vector<double> Q2(cp2), K2(cp2), V2(cp2), A(static_cast<std::size_t>(P2) * P2),
            O2(cp2), dO(cp2), dV(cp2), dA(static_cast<std::size_t>(P2) * P2),
            dS(static_cast<std::size_t>(P2) * P2), dQ(cp2), dK(cp2);
        using namespace attn_detail;
        for (int bi = 0; bi < B2; ++bi) {
            const double* X = xv2.ptr() + static_cast<std::size_t>(bi) * cp2;
            const double* G = go.ptr() + static_cast<std::size_t>(bi) * cp2;
            // recompute forward intermediates
            matmul(gr.v(pq).ptr(), X, Q2.data(), C2, C2, P2);
            matmul(gr.v(pk).ptr(), X, K2.data(), C2, C2, P2);
            matmul(gr.v(pv).ptr(), X, V2.data(), C2, C2, P2);
            for (auto& s : A) s = 0.0;
            matmul_at_b_acc(Q2.data(), K2.data(), A.data(), C2, P2, P2);
            for (auto& s : A) s *= isc;
            softmax_rows(A.data(), P2, P2);
            for (auto& o : O2) o = 0.0;
            matmul_a_bt_acc(V2.data(), A.data(), O2.data(), C2, P2, P2);
            // residual
            if (gr.nodes[px].needs_grad) {
                double* gx = gr.g(px).ptr() + static_cast<std::size_t>(bi) * cp2;
                for (std::size_t i = 0; i < cp2; ++i) gx[i] += G[i];
            }
            // dWo += G * O^T ; dO = Wo^T G
            if (gr.nodes[po].needs_grad)
                matmul_a_bt_acc(G, O2.data(), gr.g(po).ptr(), C2, P2, C2);
            for (auto& o : dO) o = 0.0;
            matmul_at_b_acc(gr.v(po).ptr(), G, dO.data(), C2, C2, P2);
            // dV = dO * A ; dA = dO^T V
            for (auto& o : dV) o = 0.0;
            {
                // dV[c][j] = sum_i dO[c][i] * A[i][j]
                for (int c = 0; c < C2; ++c) {
                    const double* dorow = dO.data() + static_cast<std::size_t>(c) * P2;
                    double* dvrow = dV.data() + static_cast<std::size_t>(c) * P2;
                    for (int i = 0; i < P2; ++i) {
                        double dv = dorow[i];
                        const double* arow = A.data() + static_cast<std::size_t>(i) * P2;
                        for (int j = 0; j < P2; ++j) dvrow[j] += dv * arow[j];
                    }
                }
            }
            for (auto& o : dA) o = 0.0;
            matmul_at_b_acc(dO.data(), V2.data(), dA.data(), C2, P2, P2);
            // softmax backward per row
            for (int i = 0; i < P2; ++i) {
                const double* arow = A.data() + static_cast<std::size_t>(i) * P2;
                const double* darow = dA.data() + static_cast<std::size_t>(i) * P2;
                double dot = 0.0;
                for (int j = 0; j < P2; ++j) dot += arow[j] * darow[j];
                double* dsrow = dS.data() + static_cast<std::size_t>(i) * P2;
                for (int j = 0; j < P2; ++j) dsrow[j] = arow[j] * (darow[j] - dot);
            }
            // dQ = K dS^T / sqrt(C); dK = Q dS / sqrt(C)
            for (auto& o : dQ) o = 0.0;
            matmul_a_bt_acc(K2.data(), dS.data(), dQ.data(), C2, P2, P2);
            for (auto& o : dK) o = 0.0;
            {
                for (int c = 0; c < C2; ++c) {
                    const double* qrow = Q2.data() + static_cast<std::size_t>(c) * P2;
                    double* dkrow = dK.data() + static_cast<std::size_t>(c) * P2;
                    for (int i = 0; i < P2; ++i) {
                        double qv = qrow[i];
                        const double* dsrow = dS.data() + static_cast<std::size_t>(i) * P2;
                        for (int j = 0; j < P2; ++j) dkrow[j] += qv * dsrow[j];
                    }
                }
            }
            for (auto& v2 : dQ) v2 *= isc;
            for (auto& v2 : dK) v2 *= isc;
            // dW* += d* X^T ; dX += W*^T d*
            if (gr.nodes[pq].needs_grad)
                matmul_a_bt_acc(dQ.data(), X, gr.g(pq).ptr(), C2, P2, C2);
            if (gr.nodes[pk].needs_grad)
                matmul_a_bt_acc(dK.data(), X, gr.g(pk).ptr(), C2, P2, C2);
            if (gr.nodes[pv].needs_grad)
                matmul_a_bt_acc(dV.data(), X, gr.g(pv).ptr(), C2, P2, C2);
            if (gr.nodes[px].needs_grad) {
                double* gx = gr.g(px).ptr() + static_cast<std::size_t>(bi) * cp2;
                matmul_at_b_acc(gr.v(pq).ptr(), dQ.data(), gx, C2, C2, P2);
                matmul_at_b_acc(gr.v(pk).ptr(), dK.data(), gx, C2, C2, P2);
                matmul_at_b_acc(gr.v(pv).ptr(), dV.data(), gx, C2, C2, P2);
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Linear and broadcast helpers
// ---------------------------------------------------------------------------

/// x: [B,in], w: [out,in], b: [out] -> [B,out]
inline Value linear(Graph& g, Value x, Value w, Value b) {
    const Tensor& xv = g.val(x);
    const Tensor& wv = g.val(w);
    const Tensor& bv = g.val(b);
    if (xv.rank() != 2 || wv.rank() != 2 || bv.rank() != 1 || xv.dim(1) != wv.dim(1) ||
        bv.dim(0) != wv.dim(0))
        throw DataError("linear: bad shapes " + xv.shape_str() + " " + wv.shape_str() + " " +
                        bv.shape_str());
    int B = xv.dim(0), in = xv.dim(1), outn = wv.dim(0);
    Tensor out({B, outn});
    for (int bi = 0; bi < B; ++bi)
        for (int o = 0; o < outn; ++o) {
            double acc = bv.data[static_cast<std::size_t>(o)];
            const double* xr = xv.ptr() + static_cast<std::size_t>(bi) * in;
            const double* wr = wv.ptr() + static_cast<std::size_t>(o) * in;
            for (int i = 0; i < in; ++i) acc += xr[i] * wr[i];
            out.data[static_cast<std::size_t>(bi) * outn + o] = acc;
        }
    int px = x.id, pw = w.id, pb = b.id;
    return g.add_node(std::move(out), {px, pw, pb}, "linear", [px, pw, pb](Graph& gr, int self) {
        const Tensor& xv2 = gr.v(px);
        const Tensor& wv2 = gr.v(pw);
        const Tensor& go = gr.g(self);
        int B2 = xv2.dim(0), in2 = xv2.dim(1), out2 = wv2.dim(0);
        for (int bi = 0; bi < B2; ++bi)
            for (int o = 0; o < out2; ++o) {
                double gv = go.data[static_cast<std::size_t>(bi) * out2 + o];
                if (gr.nodes[pb].needs_grad) gr.g(pb).data[static_cast<std::size_t>(o)] += gv;
                const double* xr = xv2.ptr() + static_cast<std::size_t>(bi) * in2;
                const double* wr = wv2.ptr() + static_cast<std::size_t>(o) * in2;
                if (gr.nodes[pw].needs_grad) {
                    double* gw = gr.g(pw).ptr() + static_cast<std::size_t>(o) * in2;
                    for (int i = 0; i < in2; ++i) gw[i] += gv * xr[i];
                }
                if (gr.nodes[px].needs_grad) {
                    double* gx = gr.g(px).ptr() + static_cast<std::size_t>(bi) * in2;
                    for (int i = 0; i < in2; ++i) gx[i] += gv * wr[i];
                }
            }
    });
}

/// x: [B,C,H,W] + t: [B,C] broadcast over spatial dims.
inline Value add_sample_channel_bias(Graph& g, Value x, Value t) {
    const Tensor& xv = g.val(x);
    const Tensor& tv = g.val(t);
    if (xv.rank() != 4 || tv.rank() != 2 || tv.dim(0) != xv.dim(0) || tv.dim(1) != xv.dim(1))
        throw DataError("add_sample_channel_bias: bad shapes " + xv.shape_str() + " vs " +
                        tv.shape_str());
    int B = xv.dim(0), C = xv.dim(1);
    std::size_t plane = static_cast<std::size_t>(xv.dim(2)) * xv.dim(3);
    Tensor out = xv;
    for (int bi = 0; bi < B; ++bi)
        for (int c = 0; c < C; ++c) {
            double bias = tv.data[static_cast<std::size_t>(bi) * C + c];
            double* op = out.ptr() + (static_cast<std::size_t>(bi) * C + c) * plane;
            for (std::size_t i = 0; i < plane; ++i) op[i] += bias;
        }
    int px = x.id, pt = t.id;
    return g.add_node(std::move(out), {px, pt}, "sample_channel_bias",
                      [px, pt, B, C, plane](Graph& gr, int self) {
                          const Tensor& go = gr.g(self);
                          if (gr.nodes[px].needs_grad)
                              for (std::size_t i = 0; i < go.data.size(); ++i)
                                  gr.g(px).data[i] += go.data[i];
                          if (gr.nodes[pt].needs_grad)
                              for (int bi = 0; bi < B; ++bi)
                                  for (int c = 0; c < C; ++c) {
                                      const double* gp =
                                          go.ptr() +
                                          (static_cast<std::size_t>(bi) * C + c) * plane;
                                      double acc = 0.0;
                                      for (std::size_t i = 0; i < plane; ++i) acc += gp[i];
                                      gr.g(pt).data[static_cast<std::size_t>(bi) * C + c] += acc;
                                  }
                      });
}

/// Per-sample constant scaling: out[b] = coef[b] * x[b]. dim 0 is the batch.
inline Value scale_per_sample(Graph& g, Value x, std::vector<double> coefs) {
    const Tensor& xv = g.val(x);
    if (xv.rank() < 2 || xv.dim(0) != static_cast<int>(coefs.size()))
        throw DataError("scale_per_sample: batch size mismatch");
    std::size_t per = xv.numel() / coefs.size();
    Tensor out = xv;
    for (std::size_t b = 0; b < coefs.size(); ++b)
        for (std::size_t i = 0; i < per; ++i) out.data[b * per + i] *= coefs[b];
    int px = x.id;
    return g.add_node(std::move(out), {px}, "scale_per_sample",
                      [px, coefs, per](Graph& gr, int self) {
                          const Tensor& go = gr.g(self);
                          for (std::size_t b = 0; b < coefs.size(); ++b)
                              for (std::size_t i = 0; i < per; ++i)
                                  gr.g(px).data[b * per + i] += coefs[b] * go.data[b * per + i];
                      });
}

/// Per-location channel L2 normalization: y[.,c,.,.] = x[.,c,.,.] / sqrt(sum_c x^2 + eps).
inline Value channel_unit_normalize(Graph& g, Value x, double eps = 1e-10) {
    const Tensor& xv = g.val(x);
    if (xv.rank() != 4) throw DataError("channel_unit_normalize: expected [B,C,H,W]");
    int B = xv.dim(0), C = xv.dim(1);
    std::size_t plane = static_cast<std::size_t>(xv.dim(2)) * xv.dim(3);
    Tensor out(xv.shape);
    for (int bi = 0; bi < B; ++bi) {
        const double* xp = xv.ptr() + static_cast<std::size_t>(bi) * C * plane;
        double* op = out.ptr() + static_cast<std::size_t>(bi) * C * plane;
        for (std::size_t i = 0; i < plane; ++i) {
            double ss = eps;
            for (int c = 0; c < C; ++c) {
                double v2 = xp[c * plane + i];
                ss += v2 * v2;
            }
            double inv = 1.0 / std::sqrt(ss);
            for (int c = 0; c < C; ++c) op[c * plane + i] = xp[c * plane + i] * inv;
        }
    }
    int px = x.id;
    return g.add_node(std::move(out), {px}, "channel_unit_normalize",
                      [px, B, C, plane, eps](Graph& gr, int self) {
                          const Tensor& xv2 = gr.v(px);
                          const Tensor& go = gr.g(self);
                          for (int bi = 0; bi < B; ++bi) {
                              const double* xp =
                                  xv2.ptr() + static_cast<std::size_t>(bi) * C * plane;
                              const double* gp =
                                  go.ptr() + static_cast<std::size_t>(bi) * C * plane;
                              double* gxp =
                                  gr.g(px).ptr() + static_cast<std::size_t>(bi) * C * plane;
                              for (std::size_t i = 0; i < plane; ++i) {
                                  double ss = eps;
                                  for (int c = 0; c < C; ++c) {
                                      double v2 = xp[c * plane + i];
                                      ss += v2 * v2;
                                  }
                                  double r = std::sqrt(ss);
                                  double inv = 1.0 / r;
                                  double inv3 = inv * inv * inv;
                                  double dot = 0.0;
                                  for (int c = 0; c < C; ++c)
                                      dot += gp[c * plane + i] * xp[c * plane + i];
                                  for (int c = 0; c < C; ++c)
                                      gxp[c * plane + i] +=
                                          gp[c * plane + i] * inv - xp[c * plane + i] * dot * inv3;
                              }
                          }
                      });
}

// ---------------------------------------------------------------------------
// Rate terms (differentiable -log2 likelihoods of unit-bin discretizations)
// ---------------------------------------------------------------------------

/// Total bits of y under per-element Gaussian(mu, sigma) integrated over
/// unit bins: sum_i -log2( Phi((y+.5-mu)/sig) - Phi((y-.5-mu)/sig) ).
/// Probabilities are floored at 1e-12 (zero gradient once floored).
inline Value gaussian_bits(Graph& g, Value y, Value mu, Value sigma) {
    constexpr double kPmin = 1e-12;
    constexpr double kInvLn2 = 1.4426950408889634074;
    const Tensor& yv = g.val(y);
    require_same_shape(yv, g.val(mu), "gaussian_bits");
    require_same_shape(yv, g.val(sigma), "gaussian_bits");
    double total = 0.0;
    {
        const Tensor& mv = g.val(mu);
        const Tensor& sv = g.val(sigma);
        for (std::size_t i = 0; i < yv.data.size(); ++i) {
            double s = sv.data[i];
            double hi = (yv.data[i] + 0.5 - mv.data[i]) / s;
            double lo = (yv.data[i] - 0.5 - mv.data[i]) / s;
            double p = std::max(normal_cdf(hi) - normal_cdf(lo), kPmin);
            total -= std::log2(p);
        }
    }
    int py = y.id, pm = mu.id, ps = sigma.id;
    return g.add_node(Tensor::scalar(total), {py, pm, ps}, "gaussian_bits",
                      [py, pm, ps](Graph& gr, int self) {
                          const Tensor& yv2 = gr.v(py);
                          const Tensor& mv = gr.v(pm);
                          const Tensor& sv = gr.v(ps);
                          double go = gr.g(self).data[0];
                          bool ny = gr.nodes[py].needs_grad, nm = gr.nodes[pm].needs_grad,
                               ns = gr.nodes[ps].needs_grad;
                          for (std::size_t i = 0; i < yv2.data.size(); ++i) {
                              double s = sv.data[i];
                              double hi = (yv2.data[i] + 0.5 - mv.data[i]) / s;
                              double lo = (yv2.data[i] - 0.5 - mv.data[i]) / s;
                              double p = normal_cdf(hi) - normal_cdf(lo);
                              if (p <= kPmin) continue;
                              double phi_hi = normal_pdf(hi), phi_lo = normal_pdf(lo);
                              double common = -go * kInvLn2 / p;
                              // d p / d y = (phi_hi - phi_lo)/s, d p/d mu = -that,
                              // d p / d sigma = -(hi*phi_hi - lo*phi_lo)/s
                              if (ny) gr.g(py).data[i] += common * (phi_hi - phi_lo) / s;
                              if (nm) gr.g(pm).data[i] -= common * (phi_hi - phi_lo) / s;
                              if (ns)
                                  gr.g(ps).data[i] -=
                                      common * (hi * phi_hi - lo * phi_lo) / s;
                          }
                      });
}

/// Factorized per-channel logistic rate for the hyper-latent:
/// p(k) = S((k+.5-loc)/s) - S((k-.5-loc)/s), s = exp(log_scale), per channel.
/// z: [B,C,H,W], loc/log_scale: [C].
inline Value logistic_bits(Graph& g, Value z, Value loc, Value log_scale) {
    constexpr double kPmin = 1e-12;
    constexpr double kInvLn2 = 1.4426950408889634074;
    const Tensor& zv = g.val(z);
    if (zv.rank() != 4) throw DataError("logistic_bits: expected [B,C,H,W]");
    int C = zv.dim(1);
    const Tensor& lv = g.val(loc);
    const Tensor& sv = g.val(log_scale);
    if (lv.rank() != 1 || lv.dim(0) != C || sv.rank() != 1 || sv.dim(0) != C)
        throw DataError("logistic_bits: loc/log_scale must be [C]");
    int B = zv.dim(0);
    std::size_t plane = static_cast<std::size_t>(zv.dim(2)) * zv.dim(3);
    double total = 0.0;
    for (int bi = 0; bi < B; ++bi)
        for (int c = 0; c < C; ++c) {
            double m = lv.data[static_cast<std::size_t>(c)];
            double s = std::exp(sv.data[static_cast<std::size_t>(c)]);
            const double* zp = zv.ptr() + (static_cast<std::size_t>(bi) * C + c) * plane;
            for (std::size_t i = 0; i < plane; ++i) {
                double p = sigmoid_fn((zp[i] + 0.5 - m) / s) - sigmoid_fn((zp[i] - 0.5 - m) / s);
                total -= std::log2(std::max(p, kPmin));
            }
        }
    int pz = z.id, pl = loc.id, ps = log_scale.id;
    return g.add_node(
        Tensor::scalar(total), {pz, pl, ps}, "logistic_bits",
        [pz, pl, ps, B, C, plane](Graph& gr, int self) {
            const Tensor& zv2 = gr.v(pz);
            const Tensor& lv2 = gr.v(pl);
            const Tensor& sv2 = gr.v(ps);
            double go = gr.g(self).data[0];
            bool nz = gr.nodes[pz].needs_grad, nl = gr.nodes[pl].needs_grad,
                 nsc = gr.nodes[ps].needs_grad;
            for (int bi = 0; bi < B; ++bi)
                for (int c = 0; c < C; ++c) {
                    double m = lv2.data[static_cast<std::size_t>(c)];
                    double s = std::exp(sv2.data[static_cast<std::size_t>(c)]);
                    const double* zp =
                        zv2.ptr() + (static_cast<std::size_t>(bi) * C + c) * plane;
                    double* gzp = nz ? gr.g(pz).ptr() +
                                           (static_cast<std::size_t>(bi) * C + c) * plane
                                     : nullptr;
                    double acc_l = 0.0, acc_s = 0.0;
                    for (std::size_t i = 0; i < plane; ++i) {
                        double hi = (zp[i] + 0.5 - m) / s;
                        double lo = (zp[i] - 0.5 - m) / s;
                        double shi = sigmoid_fn(hi), slo = sigmoid_fn(lo);
                        double p = shi - slo;
                        if (p <= kPmin) continue;
                        double dhi = shi * (1.0 - shi), dlo = slo * (1.0 - slo);
                        double common = -go * kInvLn2 / p;
                        if (nz) gzp[i] += common * (dhi - dlo) / s;
                        acc_l -= common * (dhi - dlo) / s;
                        acc_s -= common * (hi * dhi - lo * dlo);  // chain through s = e^ls
                    }
                    if (nl) gr.g(pl).data[static_cast<std::size_t>(c)] += acc_l;
                    if (nsc) gr.g(ps).data[static_cast<std::size_t>(c)] += acc_s;
                }
        });
}

// ---------------------------------------------------------------------------
// Timestep embedding (pure function; enters graphs as a constant leaf)
// ---------------------------------------------------------------------------

/// Sinusoidal embedding of a step index: first half sin, second half cos,
/// with geometric frequencies from 1 down to 1/10000.
inline Tensor timestep_embedding(int n, int dim) {
    if (dim < 2 || dim % 2 != 0) throw DataError("timestep_embedding: dim must be even and >= 2");
    if (n < 0) throw DataError("timestep_embedding: n must be >= 0");
    int half = dim / 2;
    Tensor out({dim});
    for (int i = 0; i < half; ++i) {
        double f = half > 1 ? std::pow(10000.0, -static_cast<double>(i) / (half - 1)) : 1.0;
        out.data[static_cast<std::size_t>(i)] = std::sin(n * f);
        out.data[static_cast<std::size_t>(half + i)] = std::cos(n * f);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking
// ---------------------------------------------------------------------------

struct GradCheckReport {
    double max_rel_error = 0.0;
    bool pass = false;
};

using ScalarBuilder = std::function<Value(Graph&, const std::vector<Value>&)>;

/// Central differences (h = 1e-5) against the tape's gradients.
/// Relative error uses denominator max(|analytic| + |numeric|, 1e-3) so that
/// a multiplicative fault on any O(1) gradient is flagged while roundoff on
/// true zeros is not.
inline GradCheckReport gradient_check(const ScalarBuilder& fn, const std::vector<Tensor>& inputs,
                                      double tol) {
    constexpr double kH = 1e-5;
    Graph g;
    std::vector<Value> vs;
    vs.reserve(inputs.size());
    for (const Tensor& t : inputs) vs.push_back(g.leaf(t, true));
    Value loss = fn(g, vs);
    if (g.val(loss).numel() != 1) throw InternalError("gradient_check: fn must return a scalar");
    g.backward(loss);
    std::vector<Tensor> analytic;
    analytic.reserve(inputs.size());
    for (Value v : vs) analytic.push_back(g.grad_of(v));

    auto eval = [&fn](const std::vector<Tensor>& xs) {
        Graph g2;
        std::vector<Value> vs2;
        vs2.reserve(xs.size());
        for (const Tensor& t : xs) vs2.push_back(g2.leaf(t, false));
        return g2.val(fn(g2, vs2)).data[0];
    };

    GradCheckReport rep;
    std::vector<Tensor> work = inputs;
    for (std::size_t ti = 0; ti < inputs.size(); ++ti) {
        for (std::size_t i = 0; i < inputs[ti].data.size(); ++i) {
            double orig = work[ti].data[i];
            work[ti].data[i] = orig + kH;
            double fp = eval(work);
            work[ti].data[i] = orig - kH;
            double fm = eval(work);
            work[ti].data[i] = orig;
            double num = (fp - fm) / (2.0 * kH);
            double ana = analytic[ti].data[i];
            double rel = std::abs(ana - num) / std::max(std::abs(ana) + std::abs(num), 1e-3);
            rep.max_rel_error = std::max(rep.max_rel_error, rel);
        }
    }
    rep.pass = rep.max_rel_error < tol;
    return rep;
}

}  // namespace dpc
