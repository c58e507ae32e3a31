#pragma once

#include <optional>
#include <string>

#include "surgpis/net/net.hpp"

namespace surgpis {

// Adam first/second moments flattened over the parameter store entry order.
struct OptimState {
  Eigen::ArrayXd m, v;
  long step = 0;
};

// On-disk layout: one directory per checkpoint.
//   manifest.json  format version, net config, parameter table, optimizer step
//   params.bin     raw float64 little-endian, parameters in table order
//   optim.bin      m then v, same layout as params.bin (only when optimizer
//                  state is present)
struct Checkpoint {
  NetConfig config;
  ParamStore params;
  std::optional<OptimState> optim;
};

void save_checkpoint(const Checkpoint& ckpt, const std::string& dir);
Checkpoint load_checkpoint(const std::string& dir);

Eigen::ArrayXd pack_params(const ParamStore& ps);
void unpack_params(ParamStore& ps, const Eigen::ArrayXd& flat);

}  // namespace surgpis
