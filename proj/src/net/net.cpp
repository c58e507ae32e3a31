#include "surgpis/net/net.hpp"

#include <cmath>
#include <stdexcept>

#include "surgpis/core/rng.hpp"

namespace surgpis {

Tensor& ParamStore::add(const std::string& name, std::vector<int> shape) {
  if (index_.count(name)) throw std::invalid_argument("duplicate parameter " + name);
  index_[name] = entries_.size();
  entries_.emplace_back(name, Tensor(std::move(shape)));
  return entries_.back().second;
}

Tensor& ParamStore::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("unknown parameter " + name);
  return entries_[it->second].second;
}

const Tensor& ParamStore::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("unknown parameter " + name);
  return entries_[it->second].second;
}

long ParamStore::total_size() const {
  long n = 0;
  for (const auto& [name, t] : entries_) n += t.numel();
  return n;
}

bool ParamStore::shape_compatible(const ParamStore& other) const {
  if (entries_.size() != other.entries_.size()) return false;
  for (size_t i = 0; i < entries_.size(); ++i) {
    if (entries_[i].first != other.entries_[i].first) return false;
    if (entries_[i].second.shape != other.entries_[i].second.shape) return false;
  }
  return true;
}

void NetConfig::check() const {
  if (embed_dim % attn_heads != 0)
    throw std::invalid_argument("embed_dim must be divisible by attn_heads");
  if (embed_dim % 4 != 0)
    throw std::invalid_argument("embed_dim must be divisible by 4 (positional encoding)");
  if (num_queries < 1 || decoder_layers < 1) throw std::invalid_argument("bad net config");
  if (part_query_mode != "specific" && part_query_mode != "generic")
    throw std::invalid_argument("part_query_mode must be 'specific' or 'generic'");
  if (catalog.num_instruments() < 1 || catalog.num_parts() < 1)
    throw std::invalid_argument("catalog must have instruments and parts");
}

Model::Model(NetConfig cfg) : cfg_(std::move(cfg)) { cfg_.check(); }

namespace {

void init_normal(Tensor& t, Rng& rng, double std) {
  for (long i = 0; i < t.numel(); ++i) t[i] = rng.normal(0.0, std);
}

// binds parameter tensors to tape leaves on demand, one leaf per name
struct Binder {
  Tape& tape;
  const ParamStore& store;
  bool with_grad;
  std::vector<std::pair<std::string, Var>>* leaves;
  std::unordered_map<std::string, Var> cache;

  Var operator()(const std::string& name) {
    if (auto it = cache.find(name); it != cache.end()) return it->second;
    Var v = tape.leaf(store.at(name), with_grad);
    cache[name] = v;
    if (leaves) leaves->push_back({name, v});
    return v;
  }
};

Var linear(Tape& t, Binder& p, Var x, const std::string& prefix) {
  return t.add_row_broadcast(t.matmul(x, p(prefix + ".w")), p(prefix + ".b"));
}

// multi-head attention; bias (optional) is added to every head's logits
Var mha(Tape& t, Binder& p, const std::string& prefix, int heads, Var q_in, Var q_posed,
        Var k_posed, Var v_in, Var bias) {
  int c = q_in->value.shape[1];
  int dh = c / heads;
  Var q = t.matmul(q_posed, p(prefix + ".wq"));
  Var k = t.matmul(k_posed, p(prefix + ".wk"));
  Var v = t.matmul(v_in, p(prefix + ".wv"));
  std::vector<Var> head_outs;
  double scl = 1.0 / std::sqrt(static_cast<double>(dh));
  for (int h = 0; h < heads; ++h) {
    Var qh = t.slice_cols(q, h * dh, dh);
    Var kh = t.slice_cols(k, h * dh, dh);
    Var vh = t.slice_cols(v, h * dh, dh);
    Var scores = t.scale(t.matmul(qh, kh, false, true), scl);
    if (bias) scores = t.add(scores, bias);
    head_outs.push_back(t.matmul(t.row_softmax(scores), vh));
  }
  Var concat = t.concat_cols(head_outs);
  return t.add_row_broadcast(t.matmul(concat, p(prefix + ".wo")), p(prefix + ".bo"));
}

Var mask_embed_mlp(Tape& t, Binder& p, Var q) {
  Var h = t.relu(linear(t, p, q, "maskmlp.l1"));
  return linear(t, p, h, "maskmlp.l2");
}

// fixed 2-d sinusoidal token embedding, [h*w, c]
Tensor sinusoidal_pos(int h, int w, int c) {
  Tensor pe({h * w, c});
  int quarter = c / 4;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      long row = static_cast<long>(y) * w + x;
      for (int i = 0; i < quarter; ++i) {
        double freq = std::pow(10000.0, -4.0 * i / c);
        pe[row * c + 4 * i + 0] = std::sin(x * freq);
        pe[row * c + 4 * i + 1] = std::cos(x * freq);
        pe[row * c + 4 * i + 2] = std::sin(y * freq);
        pe[row * c + 4 * i + 3] = std::cos(y * freq);
      }
    }
  return pe;
}

constexpr double kAttnBiasFloor = 4.54e-5;  // log(.) ~ -10

}  // namespace

ParamStore Model::init_params(uint64_t seed) const {
  const int c = cfg_.embed_dim, s = cfg_.stem_channels, nq = cfg_.num_queries;
  const int ncls = cfg_.num_classes_out(), cpart = cfg_.num_parts();
  ParamStore ps;
  Rng rng = Rng::derive(seed, 0xC0DEULL);

  auto conv = [&](const std::string& name, int cout, int cin, int k) {
    init_normal(ps.add(name + ".w", {cout, cin, k, k}), rng,
                std::sqrt(2.0 / (cin * k * k)));
    ps.add(name + ".b", {cout});
  };
  auto lin = [&](const std::string& name, int fan_in, int fan_out) {
    init_normal(ps.add(name + ".w", {fan_in, fan_out}), rng,
                std::sqrt(2.0 / (fan_in + fan_out)));
    ps.add(name + ".b", {fan_out});
  };
  auto ln = [&](const std::string& name) {
    ps.add(name + ".g", {c}).data.setConstant(1.0);
    ps.add(name + ".b", {c});
  };

  conv("stem", s, 3, 3);
  conv("back1", c, 3, 3);
  conv("back2", c, c, 3);
  conv("back3", c, c, 3);
  conv("back4", c, c, 3);
  conv("fpn.p8", c, c, 1);
  conv("fpn.lat4", c, c, 1);
  conv("fpn.fuse4", c, c, 3);
  conv("fpn.lat2", c, c, 1);
  conv("fpn.fuse2", c, c, 3);
  conv("fpn.out", c, c + s, 1);

  init_normal(ps.add("query_feat", {nq, c}), rng, 1.0 / std::sqrt(c));
  init_normal(ps.add("query_pos", {nq, c}), rng, 1.0 / std::sqrt(c));

  auto attn = [&](const std::string& prefix) {
    init_normal(ps.add(prefix + ".wq", {c, c}), rng, std::sqrt(1.0 / c));
    init_normal(ps.add(prefix + ".wk", {c, c}), rng, std::sqrt(1.0 / c));
    init_normal(ps.add(prefix + ".wv", {c, c}), rng, std::sqrt(1.0 / c));
    init_normal(ps.add(prefix + ".wo", {c, c}), rng, std::sqrt(1.0 / c));
    ps.add(prefix + ".bo", {c});
  };
  for (int l = 0; l < cfg_.decoder_layers; ++l) {
    std::string d = "dec" + std::to_string(l);
    attn(d + ".cross");
    ln(d + ".cross.ln");
    attn(d + ".self");
    ln(d + ".self.ln");
    lin(d + ".ffn.l1", c, 2 * c);
    lin(d + ".ffn.l2", 2 * c, c);
    ln(d + ".ffn.ln");
  }

  lin("class", c, ncls);
  lin("maskmlp.l1", c, c);
  lin("maskmlp.l2", c, c);

  if (cfg_.part_query_mode == "specific") {
    lin("part.trunk.l1", c, c);
    lin("part.trunk.l2", c, c);
    for (int k = 0; k < cpart; ++k) lin("part.head" + std::to_string(k), c, c);
  } else {
    init_normal(ps.add("part.generic", {cpart * nq, c}), rng, 1.0 / std::sqrt(c));
  }
  return ps;
}

Var predict_masks(Tape& tape, Var queries, Var features) {
  if (queries->value.shape[1] != features->value.shape[0])
    throw std::invalid_argument("predict_masks: embedding dimension mismatch");
  return tape.sigmoid(tape.matmul(queries, features));
}

Var Model::part_query_transform(Tape& tape, Var queries, const ParamStore& params, bool with_grad,
                                std::vector<std::pair<std::string, Var>>* leaves) const {
  Binder p{tape, params, with_grad, leaves};
  const int nq = queries->value.shape[0], cpart = cfg_.num_parts();
  std::vector<Var> per_part;  // each [nq, c], part-major
  if (cfg_.part_query_mode == "specific") {
    Var t1 = tape.relu(linear(tape, p, queries, "part.trunk.l1"));
    Var t2 = tape.relu(linear(tape, p, t1, "part.trunk.l2"));
    for (int k = 0; k < cpart; ++k)
      per_part.push_back(linear(tape, p, t2, "part.head" + std::to_string(k)));
  } else {
    Var generic = p("part.generic");
    for (int k = 0; k < cpart; ++k) {
      std::vector<int> rows;
      for (int j = 0; j < nq; ++j) rows.push_back(j * cpart + k);
      per_part.push_back(tape.gather_rows(generic, rows));
    }
  }
  // interleave to query-major ordering: row j*C^part + k
  Var stacked = tape.concat_rows(per_part);
  std::vector<int> order;
  for (int j = 0; j < nq; ++j)
    for (int k = 0; k < cpart; ++k) order.push_back(k * nq + j);
  return tape.gather_rows(stacked, order);
}

Model::GraphOut Model::forward_graph(Tape& tape, const ImageF& image, const ParamStore& params,
                                     bool with_grad) const {
  const int h = image.h, w = image.w;
  if (h < 16 || w < 16 || h % 8 != 0 || w % 8 != 0)
    throw std::invalid_argument("image size must be >= 16 and divisible by 8");
  const int c = cfg_.embed_dim, nq = cfg_.num_queries, cpart = cfg_.num_parts();

  GraphOut out;
  out.h = h;
  out.w = w;
  Binder p{tape, params, with_grad, &out.param_leaves};

  Var x = tape.constant(Tensor({3, h, w}, Eigen::Map<const Eigen::ArrayXd>(
                                              image.data.data(), image.data.size())));
  auto conv = [&](Var in, const std::string& name, int stride) {
    return tape.conv2d(in, p(name + ".w"), p(name + ".b"), stride,
                       params.at(name + ".w").shape[2] / 2);
  };

  // backbone
  Var stem = tape.relu(conv(x, "stem", 1));   // [S, h, w]
  Var b1 = tape.relu(conv(x, "back1", 2));    // [C, h/2, w/2]
  Var b2 = tape.relu(conv(b1, "back2", 2));   // [C, h/4, w/4]
  Var b3 = tape.relu(conv(b2, "back3", 2));   // [C, h/8, w/8]
  Var b4 = tape.relu(conv(b3, "back4", 1));   // [C, h/8, w/8]

  // pixel decoder
  Var p8 = conv(b4, "fpn.p8", 1);
  Var p4 = tape.relu(
      conv(tape.add(tape.upsample_bilinear2x(p8), conv(b2, "fpn.lat4", 1)), "fpn.fuse4", 1));
  Var p2 = tape.relu(
      conv(tape.add(tape.upsample_bilinear2x(p4), conv(b1, "fpn.lat2", 1)), "fpn.fuse2", 1));
  // channel-concat the stem with the upsampled pyramid top
  Var up_full = tape.upsample_bilinear2x(p2);  // [C, h, w]
  Var cat = tape.reshape(
      tape.concat_rows({tape.reshape(up_full, {c, h * w}),
                        tape.reshape(stem, {cfg_.stem_channels, h * w})}),
      {c + cfg_.stem_channels, h, w});
  Var feat = conv(cat, "fpn.out", 1);             // F, [C, h, w]
  Var feat_mat = tape.reshape(feat, {c, h * w});  // [C, h*w]

  // decoder tokens from the h/4 level
  const int h4 = h / 4, w4 = w / 4, ntok = h4 * w4;
  Var tok_feat = tape.reshape(p4, {c, ntok});        // [C, ntok]
  Var tokens = tape.transpose2d(tok_feat);           // [ntok, C]
  Var tok_pos = tape.constant(sinusoidal_pos(h4, w4, c));
  Var tokens_posed = tape.add(tokens, tok_pos);

  Var q = p("query_feat");
  Var q_pos = p("query_pos");
  for (int l = 0; l < cfg_.decoder_layers; ++l) {
    std::string d = "dec" + std::to_string(l);
    // soft attention bias from the current queries' own mask estimate
    Var m_tok = tape.matmul(mask_embed_mlp(tape, p, q), tok_feat);
    Var bias = tape.log_clamped(tape.sigmoid(m_tok), kAttnBiasFloor);

    Var q_posed = tape.add(q, q_pos);
    Var ca = mha(tape, p, d + ".cross", cfg_.attn_heads, q, q_posed, tokens_posed, tokens, bias);
    q = tape.layer_norm_rows(tape.add(q, ca), p(d + ".cross.ln.g"), p(d + ".cross.ln.b"));

    q_posed = tape.add(q, q_pos);
    Var sa = mha(tape, p, d + ".self", cfg_.attn_heads, q, q_posed, q_posed, q, nullptr);
    q = tape.layer_norm_rows(tape.add(q, sa), p(d + ".self.ln.g"), p(d + ".self.ln.b"));

    Var ff = linear(tape, p, tape.relu(linear(tape, p, q, d + ".ffn.l1")), d + ".ffn.l2");
    q = tape.layer_norm_rows(tape.add(q, ff), p(d + ".ffn.ln.g"), p(d + ".ffn.ln.b"));
  }
  out.queries = q;

  out.class_probs = tape.row_softmax(linear(tape, p, q, "class"));
  out.inst_masks = predict_masks(tape, mask_embed_mlp(tape, p, q), feat_mat);

  out.part_queries = part_query_transform(tape, q, params, with_grad, &out.param_leaves);
  for (int k = 0; k < cpart; ++k) {
    std::vector<int> rows;
    for (int j = 0; j < nq; ++j) rows.push_back(j * cpart + k);
    Var qk = tape.gather_rows(out.part_queries, rows);  // [nq, C] part-k queries
    out.part_masks.push_back(predict_masks(tape, qk, feat_mat));
  }
  return out;
}

PredictionSet Model::forward(const ImageF& image, const ParamStore& params) const {
  Tape tape;
  GraphOut g = forward_graph(tape, image, params, false);
  PredictionSet ps;
  ps.nq = cfg_.num_queries;
  ps.h = g.h;
  ps.w = g.w;
  ps.class_probs = g.class_probs->value;
  ps.inst_masks = g.inst_masks->value;
  for (Var m : g.part_masks) ps.part_masks.push_back(m->value);
  return ps;
}

}  // namespace surgpis
