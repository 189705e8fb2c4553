#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "adapterlab/tensor.hpp"

namespace adapterlab {

enum class OpKind : int {
    leaf = 0,
    matmul,
    add,
    add_row,
    mul,
    relu,
    gelu,
    layer_norm,
    embedding,
    attention,
    reduce_rows,
    concat_rows,
    softmax_xent,
    sum_all,
    kCount
};

constexpr size_t kOpKindCount = static_cast<size_t>(OpKind::kCount);

inline const char* op_kind_name(OpKind k) {
    static const char* names[] = {"leaf",      "matmul",    "add",         "add_row",     "mul",
                                  "relu",      "gelu",      "layer_norm",  "embedding",   "attention",
                                  "reduce_rows", "concat_rows", "softmax_xent", "sum_all"};
    return names[static_cast<int>(k)];
}

// Exact kernel counters: each executed forward op and each executed
// per-input backward kernel increments exactly one slot.
struct OpCounters {
    std::array<uint64_t, kOpKindCount> fwd{};
    std::array<uint64_t, kOpKindCount> bwd{};

    uint64_t fwd_count(OpKind k) const { return fwd[static_cast<size_t>(k)]; }
    uint64_t bwd_count(OpKind k) const { return bwd[static_cast<size_t>(k)]; }
    uint64_t bwd_total() const {
        uint64_t t = 0;
        for (uint64_t v : bwd) t += v;
        return t;
    }
    void reset() {
        fwd.fill(0);
        bwd.fill(0);
    }
};

// Define-by-run tape, rebuilt per forward pass. Node ids index into `nodes`
// in topological (creation) order. Backward is truncated per op: a node runs
// its backward only if its subgraph contains a trainable parameter, so
// nothing below the lowest trainable op executes and frozen parameters are
// never written.
template <typename Real>
class TapeT {
  public:
    struct Node {
        OpKind kind = OpKind::leaf;
        std::vector<int> in;
        TensorT<Real> value;
        TensorT<Real> grad;
        bool requires_grad = false;
        bool grad_live = false;  // grad buffer allocated and zeroed this backward
        ParameterT<Real>* param = nullptr;

        // op extras
        bool transpose_b = false;              // matmul
        Real eps = Real(0);                    // layer_norm
        int heads = 0;                         // attention
        int valid = 0;                         // attention key-prefix length
        std::vector<int> ids;                  // embedding ids / xent targets
        std::vector<Real> weights;             // reduce_rows
        TensorT<Real> saved;                   // op-specific activations
        TensorT<Real> saved2;
    };

    OpCounters counters;

    void clear() {
        nodes_.clear();
        param_ids_.clear();
    }

    size_t size() const { return nodes_.size(); }
    const Node& node(int id) const { return nodes_.at(static_cast<size_t>(id)); }
    const TensorT<Real>& value(int id) const { return nodes_.at(static_cast<size_t>(id)).value; }

    int constant(TensorT<Real> v) {
        Node n;
        n.kind = OpKind::leaf;
        n.value = std::move(v);
        n.requires_grad = false;
        return push(std::move(n));
    }

    // Parameter leaves are deduplicated within a tape so gradients from every
    // use site accumulate into one buffer.
    int param(ParameterT<Real>& p) {
        auto it = param_ids_.find(&p);
        if (it != param_ids_.end()) return it->second;
        Node n;
        n.kind = OpKind::leaf;
        n.value = p.value;
        n.param = &p;
        n.requires_grad = p.trainable;
        int id = push(std::move(n));
        param_ids_.emplace(&p, id);
        return id;
    }

    int matmul(int a, int b, bool transpose_b = false) {
        const auto& ta = val(a);
        const auto& tb = val(b);
        size_t m = ta.rows(), k = ta.cols();
        size_t kb = transpose_b ? tb.cols() : tb.rows();
        size_t n = transpose_b ? tb.rows() : tb.cols();
        if (k != kb)
            throw DimensionError("matmul inner dimensions disagree: " + ta.shape_str() + " vs " + tb.shape_str() +
                                 (transpose_b ? " (rhs transposed)" : ""));
        Node nd;
        nd.kind = OpKind::matmul;
        nd.in = {a, b};
        nd.transpose_b = transpose_b;
        nd.value = TensorT<Real>({m, n});
        if (transpose_b)
            matmul_nt_accumulate(ta.data.data(), tb.data.data(), nd.value.data.data(), m, k, n);
        else
            matmul_accumulate(ta.data.data(), tb.data.data(), nd.value.data.data(), m, k, n);
        return push_op(std::move(nd), a, b);
    }

    int add(int a, int b) {
        const auto& ta = val(a);
        const auto& tb = val(b);
        if (!ta.same_shape(tb)) throw DimensionError("add shapes disagree: " + ta.shape_str() + " vs " + tb.shape_str());
        Node nd;
        nd.kind = OpKind::add;
        nd.in = {a, b};
        nd.value = ta;
        for (size_t i = 0; i < tb.numel(); ++i) nd.value.data[i] += tb.data[i];
        return push_op(std::move(nd), a, b);
    }

    // x[r x d] + bias[d], broadcast over rows
    int add_row(int x, int bias) {
        const auto& tx = val(x);
        const auto& tb = val(bias);
        if (tb.numel() != tx.cols())
            throw DimensionError("add_row bias width disagrees: " + tx.shape_str() + " vs " + tb.shape_str());
        Node nd;
        nd.kind = OpKind::add_row;
        nd.in = {x, bias};
        nd.value = tx;
        size_t r = tx.rows(), d = tx.cols();
        for (size_t i = 0; i < r; ++i)
            for (size_t j = 0; j < d; ++j) nd.value.data[i * d + j] += tb.data[j];
        return push_op(std::move(nd), x, bias);
    }

    int mul(int a, int b) {
        const auto& ta = val(a);
        const auto& tb = val(b);
        if (!ta.same_shape(tb)) throw DimensionError("mul shapes disagree: " + ta.shape_str() + " vs " + tb.shape_str());
        Node nd;
        nd.kind = OpKind::mul;
        nd.in = {a, b};
        nd.value = ta;
        for (size_t i = 0; i < tb.numel(); ++i) nd.value.data[i] *= tb.data[i];
        return push_op(std::move(nd), a, b);
    }

    int relu(int x) {
        Node nd;
        nd.kind = OpKind::relu;
        nd.in = {x};
        nd.value = val(x);
        for (Real& v : nd.value.data)
            if (v < Real(0)) v = Real(0);
        return push_op(std::move(nd), x);
    }

    int gelu(int x) {
        Node nd;
        nd.kind = OpKind::gelu;
        nd.in = {x};
        nd.value = val(x);
        for (Real& v : nd.value.data) {
            double xv = static_cast<double>(v);
            v = static_cast<Real>(0.5 * xv * (1.0 + std::erf(xv * 0.7071067811865476)));
        }
        return push_op(std::move(nd), x);
    }

    // Per-row normalization then affine. Saves x_hat and 1/sigma for backward.
    int layer_norm(int x, int gamma, int beta, Real eps) {
        const auto& tx = val(x);
        const auto& tg = val(gamma);
        const auto& tb = val(beta);
        size_t d = tx.cols();
        if (d == 0) throw DimensionError("layer_norm over zero-width rows");
        if (eps <= Real(0)) throw ContractError("layer_norm eps must be positive");
        if (tg.numel() != d || tb.numel() != d)
            throw DimensionError("layer_norm affine width disagrees: " + tx.shape_str() + " vs gamma " + tg.shape_str());
        size_t r = tx.rows();
        Node nd;
        nd.kind = OpKind::layer_norm;
        nd.in = {x, gamma, beta};
        nd.eps = eps;
        nd.value = TensorT<Real>({r, d});
        nd.saved = TensorT<Real>({r, d});   // x_hat
        nd.saved2 = TensorT<Real>({r, 1});  // 1/sigma
        for (size_t i = 0; i < r; ++i) {
            const Real* row = tx.data.data() + i * d;
            Real mean = 0;
            for (size_t j = 0; j < d; ++j) mean += row[j];
            mean /= static_cast<Real>(d);
            Real var = 0;
            for (size_t j = 0; j < d; ++j) {
                Real c = row[j] - mean;
                var += c * c;
            }
            var /= static_cast<Real>(d);
            Real inv_sigma = Real(1) / std::sqrt(var + eps);
            nd.saved2.data[i] = inv_sigma;
            for (size_t j = 0; j < d; ++j) {
                Real xh = (row[j] - mean) * inv_sigma;
                nd.saved.data[i * d + j] = xh;
                nd.value.data[i * d + j] = tg.data[j] * xh + tb.data[j];
            }
        }
        return push_op(std::move(nd), x, gamma, beta);
    }

    // Row gather: out[i] = table[ids[i]].
    int embedding(int table, std::vector<int> ids) {
        const auto& tt = val(table);
        size_t v = tt.rows(), d = tt.cols();
        for (int id : ids)
            if (id < 0 || static_cast<size_t>(id) >= v)
                throw VocabError("embedding id " + std::to_string(id) + " outside table of " + std::to_string(v));
        Node nd;
        nd.kind = OpKind::embedding;
        nd.in = {table};
        nd.value = TensorT<Real>({ids.size(), d});
        for (size_t i = 0; i < ids.size(); ++i)
            std::copy_n(tt.data.data() + static_cast<size_t>(ids[i]) * d, d, nd.value.data.data() + i * d);
        nd.ids = std::move(ids);
        return push_op(std::move(nd), table);
    }

    // Multi-head scaled dot-product attention over the first `valid` key
    // positions. Padded keys are skipped outright, so a padded sequence
    // produces bit-identical rows to its unpadded version.
    int attention(int q, int k, int v, int valid, int heads) {
        const auto& tq = val(q);
        const auto& tk = val(k);
        const auto& tv = val(v);
        size_t t = tq.rows(), d = tq.cols();
        if (!tk.same_shape(tq) || !tv.same_shape(tq))
            throw DimensionError("attention q/k/v shapes disagree: " + tq.shape_str() + " vs " + tk.shape_str());
        if (heads <= 0 || d % static_cast<size_t>(heads) != 0)
            throw DimensionError("attention width " + std::to_string(d) + " not divisible by " + std::to_string(heads) + " heads");
        if (valid <= 0 || static_cast<size_t>(valid) > t)
            throw DimensionError("attention mask length " + std::to_string(valid) + " incompatible with " + std::to_string(t) + " rows");
        size_t nv = static_cast<size_t>(valid);
        size_t dh = d / static_cast<size_t>(heads);
        Real scale = Real(1) / static_cast<Real>(std::sqrt(static_cast<double>(dh)));
        Node nd;
        nd.kind = OpKind::attention;
        nd.in = {q, k, v};
        nd.heads = heads;
        nd.valid = valid;
        nd.value = TensorT<Real>({t, d});
        nd.saved = TensorT<Real>({static_cast<size_t>(heads), t, nv});  // probs
        for (size_t h = 0; h < static_cast<size_t>(heads); ++h) {
            size_t hoff = h * dh;
            Real* probs = nd.saved.data.data() + h * t * nv;
            for (size_t i = 0; i < t; ++i) {
                Real* prow = probs + i * nv;
                Real mx = Real(0);
                for (size_t j = 0; j < nv; ++j) {
                    Real s = 0;
                    const Real* qr = tq.data.data() + i * d + hoff;
                    const Real* kr = tk.data.data() + j * d + hoff;
                    for (size_t p = 0; p < dh; ++p) s += qr[p] * kr[p];
                    s *= scale;
                    prow[j] = s;
                    if (j == 0 || s > mx) mx = s;
                }
                Real denom = 0;
                for (size_t j = 0; j < nv; ++j) {
                    Real e = std::exp(prow[j] - mx);
                    prow[j] = e;
                    denom += e;
                }
                Real inv = Real(1) / denom;
                for (size_t j = 0; j < nv; ++j) prow[j] *= inv;
                Real* orow = nd.value.data.data() + i * d + hoff;
                for (size_t j = 0; j < nv; ++j) {
                    const Real pij = prow[j];
                    const Real* vr = tv.data.data() + j * d + hoff;
                    for (size_t p = 0; p < dh; ++p) orow[p] += pij * vr[p];
                }
            }
        }
        return push_op(std::move(nd), q, k, v);
    }

    // Weighted row reduction: out[1 x d] = sum_i w[i] * x[i,:]. Pooling.
    int reduce_rows(int x, std::vector<Real> w) {
        const auto& tx = val(x);
        size_t r = tx.rows(), d = tx.cols();
        if (w.size() != r)
            throw DimensionError("reduce_rows weight length " + std::to_string(w.size()) + " vs " + tx.shape_str());
        Node nd;
        nd.kind = OpKind::reduce_rows;
        nd.in = {x};
        nd.value = TensorT<Real>({size_t(1), d});
        for (size_t i = 0; i < r; ++i) {
            const Real wi = w[i];
            if (wi == Real(0)) continue;
            const Real* row = tx.data.data() + i * d;
            for (size_t j = 0; j < d; ++j) nd.value.data[j] += wi * row[j];
        }
        nd.weights = std::move(w);
        return push_op(std::move(nd), x);
    }

    // Stack same-width inputs along rows.
    int concat_rows(const std::vector<int>& parts) {
        if (parts.empty()) throw ContractError("concat_rows of nothing");
        size_t d = val(parts[0]).cols(), r = 0;
        for (int p : parts) {
            if (val(p).cols() != d)
                throw DimensionError("concat_rows width disagrees: " + val(parts[0]).shape_str() + " vs " + val(p).shape_str());
            r += val(p).rows();
        }
        Node nd;
        nd.kind = OpKind::concat_rows;
        nd.in = parts;
        nd.value = TensorT<Real>({r, d});
        size_t off = 0;
        for (int p : parts) {
            const auto& tp = val(p);
            std::copy(tp.data.begin(), tp.data.end(), nd.value.data.begin() + off);
            off += tp.numel();
        }
        bool rg = false;
        for (int p : parts) rg = rg || nodes_[static_cast<size_t>(p)].requires_grad;
        nd.requires_grad = rg;
        return push(std::move(nd), /*count=*/true);
    }

    // Mean over rows of softmax cross-entropy against per-row target columns.
    int softmax_xent(int scores, std::vector<int> targets) {
        const auto& ts = val(scores);
        size_t m = ts.rows(), n = ts.cols();
        if (targets.size() != m) throw ContractError("softmax_xent needs one target per row");
        for (int t : targets)
            if (t < 0 || static_cast<size_t>(t) >= n) throw ContractError("softmax_xent target column out of range");
        Node nd;
        nd.kind = OpKind::softmax_xent;
        nd.in = {scores};
        nd.saved = TensorT<Real>({m, n});  // probs
        Real loss = 0;
        for (size_t i = 0; i < m; ++i) {
            const Real* row = ts.data.data() + i * n;
            Real mx = row[0];
            for (size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
            Real denom = 0;
            for (size_t j = 0; j < n; ++j) {
                Real e = std::exp(row[j] - mx);
                nd.saved.data[i * n + j] = e;
                denom += e;
            }
            Real inv = Real(1) / denom;
            for (size_t j = 0; j < n; ++j) nd.saved.data[i * n + j] *= inv;
            loss += std::log(denom) + mx - row[static_cast<size_t>(targets[i])];
        }
        nd.value = TensorT<Real>({size_t(1), size_t(1)});
        nd.value.data[0] = loss / static_cast<Real>(m);
        nd.ids = std::move(targets);
        return push_op(std::move(nd), scores);
    }

    int sum_all(int x) {
        Node nd;
        nd.kind = OpKind::sum_all;
        nd.in = {x};
        nd.value = TensorT<Real>({size_t(1), size_t(1)});
        Real s = 0;
        for (Real v : val(x).data) s += v;
        nd.value.data[0] = s;
        return push_op(std::move(nd), x);
    }

    // Reverse-mode sweep from a scalar loss node. With truncate=true (the
    // normal mode) an op's backward runs only when some input's subgraph
    // holds a trainable parameter; truncate=false is the reference mode that
    // propagates through everything (trainable grads must match bit-exactly).
    void backward(int loss, bool truncate = true) {
        if (loss < 0 || static_cast<size_t>(loss) >= nodes_.size())
            throw StaleTapeError("loss node " + std::to_string(loss) + " not on this tape");
        Node& ln = nodes_[static_cast<size_t>(loss)];
        if (ln.value.numel() != 1) throw ContractError("backward needs a scalar loss, got " + ln.value.shape_str());
        if (truncate && !ln.requires_grad) return;  // nothing trainable anywhere below

        for (auto& n : nodes_) n.grad_live = false;
        ensure_grad(ln);
        ln.grad.data[0] = Real(1);

        for (int i = loss; i >= 0; --i) {
            Node& nd = nodes_[static_cast<size_t>(i)];
            if (!nd.grad_live) continue;
            if (truncate && !nd.requires_grad) continue;
            if (nd.kind == OpKind::leaf) {
                if (nd.param && nd.param->trainable) {
                    nd.param->ensure_grad();
                    for (size_t j = 0; j < nd.grad.numel(); ++j) nd.param->grad.data[j] += nd.grad.data[j];
                }
                continue;
            }
            backward_op(nd, truncate);
        }
    }

  private:
    std::vector<Node> nodes_;
    std::unordered_map<const ParameterT<Real>*, int> param_ids_;

    const TensorT<Real>& val(int id) const {
        if (id < 0 || static_cast<size_t>(id) >= nodes_.size())
            throw StaleTapeError("node " + std::to_string(id) + " not on this tape");
        return nodes_[static_cast<size_t>(id)].value;
    }

    int push(Node n, bool count = false) {
        if (count) counters.fwd[static_cast<size_t>(n.kind)]++;
#ifndef NDEBUG
        assert(n.value.all_finite() && "forward op produced non-finite values");
#endif
        nodes_.push_back(std::move(n));
        return static_cast<int>(nodes_.size()) - 1;
    }

    int push_op(Node n, int a, int b = -1, int c = -1) {
        bool rg = nodes_[static_cast<size_t>(a)].requires_grad;
        if (b >= 0) rg = rg || nodes_[static_cast<size_t>(b)].requires_grad;
        if (c >= 0) rg = rg || nodes_[static_cast<size_t>(c)].requires_grad;
        n.requires_grad = rg;
        return push(std::move(n), /*count=*/true);
    }

    void ensure_grad(Node& n) {
        if (!n.grad_live) {
            if (!n.grad.same_shape(n.value)) n.grad = TensorT<Real>(n.value.shape);
            else n.grad.fill(Real(0));
            n.grad_live = true;
        }
    }

    // True when the input should receive gradient this sweep.
    bool wants(int id, bool truncate) {
        Node& n = nodes_[static_cast<size_t>(id)];
        if (truncate && !n.requires_grad) return false;
        if (n.kind == OpKind::leaf && !n.param && truncate) return false;  // plain constant
        return true;
    }

    Node& grad_sink(int id) {
        Node& n = nodes_[static_cast<size_t>(id)];
        ensure_grad(n);
        return n;
    }

    void bump(OpKind k) { counters.bwd[static_cast<size_t>(k)]++; }

    void backward_op(Node& nd, bool truncate) {
        const TensorT<Real>& g = nd.grad;
        switch (nd.kind) {
            case OpKind::matmul: {
                const auto& a = nodes_[static_cast<size_t>(nd.in[0])].value;
                const auto& b = nodes_[static_cast<size_t>(nd.in[1])].value;
                size_t m = a.rows(), k = a.cols(), n = g.cols();
                if (wants(nd.in[0], truncate)) {
                    Node& sink = grad_sink(nd.in[0]);
                    if (nd.transpose_b) {
                        matmul_accumulate(g.data.data(), b.data.data(), sink.grad.data.data(), m, n, k);
                    } else {
                        TensorT<Real> bt = transposed(b);
                        matmul_accumulate(g.data.data(), bt.data.data(), sink.grad.data.data(), m, n, k);
                    }
                    bump(OpKind::matmul);
                }
                if (wants(nd.in[1], truncate)) {
                    Node& sink = grad_sink(nd.in[1]);
                    if (nd.transpose_b)
                        matmul_tn_accumulate(g.data.data(), a.data.data(), sink.grad.data.data(), m, n, k);
                    else
                        matmul_tn_accumulate(a.data.data(), g.data.data(), sink.grad.data.data(), m, k, n);
                    bump(OpKind::matmul);
                }
                break;
            }
            case OpKind::add: {
                for (int s = 0; s < 2; ++s) {
                    if (!wants(nd.in[s], truncate)) continue;
                    Node& sink = grad_sink(nd.in[s]);
                    for (size_t i = 0; i < g.numel(); ++i) sink.grad.data[i] += g.data[i];
                    bump(OpKind::add);
                }
                break;
            }
            case OpKind::add_row: {
                size_t r = g.rows(), d = g.cols();
                if (wants(nd.in[0], truncate)) {
                    Node& sink = grad_sink(nd.in[0]);
                    for (size_t i = 0; i < g.numel(); ++i) sink.grad.data[i] += g.data[i];
                    bump(OpKind::add_row);
                }
                if (wants(nd.in[1], truncate)) {
                    Node& sink = grad_sink(nd.in[1]);
                    for (size_t i = 0; i < r; ++i)
                        for (size_t j = 0; j < d; ++j) sink.grad.data[j] += g.data[i * d + j];
                    bump(OpKind::add_row);
                }
                break;
            }
            case OpKind::mul: {
                const auto& a = nodes_[static_cast<size_t>(nd.in[0])].value;
                const auto& b = nodes_[static_cast<size_t>(nd.in[1])].value;
                if (wants(nd.in[0], truncate)) {
                    Node& sink = grad_sink(nd.in[0]);
                    for (size_t i = 0; i < g.numel(); ++i) sink.grad.data[i] += g.data[i] * b.data[i];
                    bump(OpKind::mul);
                }
                if (wants(nd.in[1], truncate)) {
                    Node& sink = grad_sink(nd.in[1]);
                    for (size_t i = 0; i < g.numel(); ++i) sink.grad.data[i] += g.data[i] * a.data[i];
                    bump(OpKind::mul);
                }
                break;
            }
            case OpKind::relu: {
                if (!wants(nd.in[0], truncate)) break;
                const auto& x = nodes_[static_cast<size_t>(nd.in[0])].value;
                Node& sink = grad_sink(nd.in[0]);
                for (size_t i = 0; i < g.numel(); ++i)
                    if (x.data[i] > Real(0)) sink.grad.data[i] += g.data[i];
                bump(OpKind::relu);
                break;
            }
            case OpKind::gelu: {
                if (!wants(nd.in[0], truncate)) break;
                const auto& x = nodes_[static_cast<size_t>(nd.in[0])].value;
                Node& sink = grad_sink(nd.in[0]);
                for (size_t i = 0; i < g.numel(); ++i) {
                    double xv = static_cast<double>(x.data[i]);
                    double cdf = 0.5 * (1.0 + std::erf(xv * 0.7071067811865476));
                    double pdf = std::exp(-0.5 * xv * xv) * 0.3989422804014327;
                    sink.grad.data[i] += g.data[i] * static_cast<Real>(cdf + xv * pdf);
                }
                bump(OpKind::gelu);
                break;
            }
            case OpKind::layer_norm: {
                size_t r = g.rows(), d = g.cols();
                const auto& gamma = nodes_[static_cast<size_t>(nd.in[1])].value;
                const auto& xhat = nd.saved;
                if (wants(nd.in[0], truncate)) {
                    Node& sink = grad_sink(nd.in[0]);
                    std::vector<Real> dxh(d);
                    for (size_t i = 0; i < r; ++i) {
                        const Real* grow = g.data.data() + i * d;
                        const Real* xrow = xhat.data.data() + i * d;
                        Real m1 = 0, m2 = 0;
                        for (size_t j = 0; j < d; ++j) {
                            dxh[j] = grow[j] * gamma.data[j];
                            m1 += dxh[j];
                            m2 += dxh[j] * xrow[j];
                        }
                        m1 /= static_cast<Real>(d);
                        m2 /= static_cast<Real>(d);
                        Real inv_sigma = nd.saved2.data[i];
                        Real* srow = sink.grad.data.data() + i * d;
                        for (size_t j = 0; j < d; ++j) srow[j] += inv_sigma * (dxh[j] - m1 - xrow[j] * m2);
                    }
                    bump(OpKind::layer_norm);
                }
                if (wants(nd.in[1], truncate)) {
                    Node& sink = grad_sink(nd.in[1]);
                    for (size_t i = 0; i < r; ++i)
                        for (size_t j = 0; j < d; ++j) sink.grad.data[j] += g.data[i * d + j] * xhat.data[i * d + j];
                    bump(OpKind::layer_norm);
                }
                if (wants(nd.in[2], truncate)) {
                    Node& sink = grad_sink(nd.in[2]);
                    for (size_t i = 0; i < r; ++i)
                        for (size_t j = 0; j < d; ++j) sink.grad.data[j] += g.data[i * d + j];
                    bump(OpKind::layer_norm);
                }
                break;
            }
            case OpKind::embedding: {
                if (!wants(nd.in[0], truncate)) break;
                Node& sink = grad_sink(nd.in[0]);
                size_t d = g.cols();
                for (size_t i = 0; i < nd.ids.size(); ++i) {
                    Real* trow = sink.grad.data.data() + static_cast<size_t>(nd.ids[i]) * d;
                    const Real* grow = g.data.data() + i * d;
                    for (size_t j = 0; j < d; ++j) trow[j] += grow[j];
                }
                bump(OpKind::embedding);
                break;
            }
            case OpKind::attention:
                backward_attention(nd, truncate);
                break;
            case OpKind::reduce_rows: {
                if (!wants(nd.in[0], truncate)) break;
                Node& sink = grad_sink(nd.in[0]);
                size_t r = sink.grad.rows(), d = sink.grad.cols();
                for (size_t i = 0; i < r; ++i) {
                    const Real wi = nd.weights[i];
                    if (wi == Real(0)) continue;
                    Real* srow = sink.grad.data.data() + i * d;
                    for (size_t j = 0; j < d; ++j) srow[j] += wi * g.data[j];
                }
                bump(OpKind::reduce_rows);
                break;
            }
            case OpKind::concat_rows: {
                size_t off = 0;
                for (int p : nd.in) {
                    const size_t len = nodes_[static_cast<size_t>(p)].value.numel();
                    if (wants(p, truncate)) {
                        Node& sink = grad_sink(p);
                        for (size_t i = 0; i < len; ++i) sink.grad.data[i] += g.data[off + i];
                        bump(OpKind::concat_rows);
                    }
                    off += len;
                }
                break;
            }
            case OpKind::softmax_xent: {
                if (!wants(nd.in[0], truncate)) break;
                Node& sink = grad_sink(nd.in[0]);
                size_t m = nd.saved.rows(), n = nd.saved.cols();
                Real gs = g.data[0] / static_cast<Real>(m);
                for (size_t i = 0; i < m; ++i) {
                    Real* srow = sink.grad.data.data() + i * n;
                    const Real* prow = nd.saved.data.data() + i * n;
                    for (size_t j = 0; j < n; ++j) srow[j] += gs * prow[j];
                    srow[static_cast<size_t>(nd.ids[i])] -= gs;
                }
                bump(OpKind::softmax_xent);
                break;
            }
            case OpKind::sum_all: {
                if (!wants(nd.in[0], truncate)) break;
                Node& sink = grad_sink(nd.in[0]);
                Real gs = g.data[0];
                for (size_t i = 0; i < sink.grad.numel(); ++i) sink.grad.data[i] += gs;
                bump(OpKind::sum_all);
                break;
            }
            case OpKind::leaf:
            case OpKind::kCount:
                break;
        }
    }

    void backward_attention(Node& nd, bool truncate) {
        const TensorT<Real>& g = nd.grad;
        const auto& tq = nodes_[static_cast<size_t>(nd.in[0])].value;
        const auto& tk = nodes_[static_cast<size_t>(nd.in[1])].value;
        const auto& tv = nodes_[static_cast<size_t>(nd.in[2])].value;
        size_t t = tq.rows(), d = tq.cols();
        size_t heads = static_cast<size_t>(nd.heads);
        size_t nv = static_cast<size_t>(nd.valid);
        size_t dh = d / heads;
        Real scale = Real(1) / static_cast<Real>(std::sqrt(static_cast<double>(dh)));

        bool wq = wants(nd.in[0], truncate);
        bool wk = wants(nd.in[1], truncate);
        bool wv = wants(nd.in[2], truncate);
        if (!wq && !wk && !wv) return;

        Node* sq = wq ? &grad_sink(nd.in[0]) : nullptr;
        Node* sk = wk ? &grad_sink(nd.in[1]) : nullptr;
        Node* sv = wv ? &grad_sink(nd.in[2]) : nullptr;

        std::vector<Real> dp(nv), ds(nv);
        for (size_t h = 0; h < heads; ++h) {
            size_t hoff = h * dh;
            const Real* probs = nd.saved.data.data() + h * t * nv;
            for (size_t i = 0; i < t; ++i) {
                const Real* prow = probs + i * nv;
                const Real* grow = g.data.data() + i * d + hoff;
                // dP and dV
                for (size_t j = 0; j < nv; ++j) {
                    const Real* vr = tv.data.data() + j * d + hoff;
                    Real acc = 0;
                    for (size_t p = 0; p < dh; ++p) acc += grow[p] * vr[p];
                    dp[j] = acc;
                    if (wv) {
                        Real* dvr = sv->grad.data.data() + j * d + hoff;
                        const Real pij = prow[j];
                        for (size_t p = 0; p < dh; ++p) dvr[p] += pij * grow[p];
                    }
                }
                if (!wq && !wk) continue;
                Real dot = 0;
                for (size_t j = 0; j < nv; ++j) dot += dp[j] * prow[j];
                for (size_t j = 0; j < nv; ++j) ds[j] = prow[j] * (dp[j] - dot) * scale;
                if (wq) {
                    Real* dqr = sq->grad.data.data() + i * d + hoff;
                    for (size_t j = 0; j < nv; ++j) {
                        const Real* kr = tk.data.data() + j * d + hoff;
                        const Real dsj = ds[j];
                        for (size_t p = 0; p < dh; ++p) dqr[p] += dsj * kr[p];
                    }
                }
                if (wk) {
                    const Real* qr = tq.data.data() + i * d + hoff;
                    for (size_t j = 0; j < nv; ++j) {
                        Real* dkr = sk->grad.data.data() + j * d + hoff;
                        const Real dsj = ds[j];
                        for (size_t p = 0; p < dh; ++p) dkr[p] += dsj * qr[p];
                    }
                }
            }
        }
        if (wq) bump(OpKind::attention);
        if (wk) bump(OpKind::attention);
        if (wv) bump(OpKind::attention);
    }
};

using Tape = TapeT<float>;

// Central-difference oracle for gradient checking. f is re-evaluated with the
// parameter perturbed elementwise; f must produce a scalar tensor.
template <typename Real>
TensorT<Real> finite_difference_grad(const std::function<TensorT<Real>()>& f, ParameterT<Real>& p, Real h = Real(1e-5)) {
    if (h <= Real(0)) throw ContractError("finite difference step must be positive");
    TensorT<Real> out(p.value.shape);
    for (size_t i = 0; i < p.value.numel(); ++i) {
        Real orig = p.value.data[i];
        p.value.data[i] = orig + h;
        TensorT<Real> fp = f();
        if (fp.numel() != 1) throw ContractError("finite_difference_grad needs a scalar function, got " + fp.shape_str());
        p.value.data[i] = orig - h;
        TensorT<Real> fm = f();
        p.value.data[i] = orig;
        out.data[i] = (fp.data[0] - fm.data[0]) / (Real(2) * h);
    }
    return out;
}

}  // namespace adapterlab
