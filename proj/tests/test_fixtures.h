#pragma once

#include "fedvirt/config.h"

namespace fedvirt::testing {

// Two or three small blob-digits clients and an MLP, fast enough for unit tests.
inline Config small_config(Rule rule, int clients = 2) {
  Config c = default_config();
  c.clients.resize(static_cast<std::size_t>(clients));
  for (ClientSpec& s : c.clients) {
    s.source.n_train = 40;
    s.source.n_test = 20;
    s.source.side = 8;
  }
  c.arch = Arch::kMlp;
  c.width = 16;
  c.ipc = 3;
  c.rule = rule;
  c.rounds = 3;
  c.tau = 1;
  c.local_distill_steps = 5;
  c.global_distill_steps = 5;
  c.batch_size = 8;
  c.dm_real_batch = 8;
  c.lambda = 0.1;
  c.lr_model = 0.05;
  c.seed = 17;
  return c;
}

}  // namespace fedvirt::testing
