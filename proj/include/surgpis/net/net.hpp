#pragma once

#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "surgpis/core/tape.hpp"
#include "surgpis/labels/labels.hpp"

namespace surgpis {

// Named parameter tensors with a deterministic iteration order.
class ParamStore {
 public:
  Tensor& add(const std::string& name, std::vector<int> shape);
  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;
  bool has(const std::string& name) const { return index_.count(name) > 0; }

  std::vector<std::pair<std::string, Tensor>>& entries() { return entries_; }
  const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }
  long total_size() const;
  bool shape_compatible(const ParamStore& other) const;

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
  std::unordered_map<std::string, size_t> index_;
};

struct NetConfig {
  int embed_dim = 64;      // C_eps
  int num_queries = 8;     // N_q
  int decoder_layers = 3;
  int attn_heads = 4;
  int stem_channels = 8;
  std::string part_query_mode = "specific";  // "specific" | "generic"
  ClassCatalog catalog = ClassCatalog::default_catalog();

  int num_inp() const { return catalog.num_inp(); }
  int num_classes_out() const { return catalog.num_inp() + 1; }  // + "no object"
  int no_object_index() const { return catalog.num_inp(); }
  int num_parts() const { return catalog.num_parts(); }

  void check() const;  // throws on invalid combinations
};

// Network output for one image. Masks are probabilities flattened to [nq, h*w].
struct PredictionSet {
  int nq = 0, h = 0, w = 0;
  Tensor class_probs;              // [nq, C^inp + 1]
  Tensor inst_masks;               // [nq, h*w]
  std::vector<Tensor> part_masks;  // C^part entries of [nq, h*w]
};

class Model {
 public:
  explicit Model(NetConfig cfg);
  const NetConfig& config() const { return cfg_; }

  ParamStore init_params(uint64_t seed) const;

  struct GraphOut {
    int h = 0, w = 0;
    Var class_probs = nullptr;       // [nq, C^inp+1], rows on the simplex
    Var inst_masks = nullptr;        // [nq, h*w], sigmoid probabilities
    std::vector<Var> part_masks;     // per part k: [nq, h*w]
    Var queries = nullptr;           // final instrument queries [nq, C_eps]
    Var part_queries = nullptr;      // [(C^part * nq), C_eps], row j*C^part + k
    std::vector<std::pair<std::string, Var>> param_leaves;
  };

  GraphOut forward_graph(Tape& tape, const ImageF& image, const ParamStore& params,
                         bool with_grad) const;
  PredictionSet forward(const ImageF& image, const ParamStore& params) const;

  // Part-specific query transformation in isolation (row j*C^part + k is the
  // part-k query of instrument query j). Appends any touched parameter
  // leaves to `leaves` when provided.
  Var part_query_transform(Tape& tape, Var queries, const ParamStore& params, bool with_grad,
                           std::vector<std::pair<std::string, Var>>* leaves = nullptr) const;

 private:
  NetConfig cfg_;
};

// mask[q, p] = sigmoid(<query_q, features[:, p]>); features is [C_eps, npix]
Var predict_masks(Tape& tape, Var queries, Var features);

}  // namespace surgpis
