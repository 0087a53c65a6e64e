#pragma once

// Everything in one include.

#include "vlseg/ablation.hpp"
#include "vlseg/attention.hpp"
#include "vlseg/autodiff.hpp"
#include "vlseg/checkpoint.hpp"
#include "vlseg/config.hpp"
#include "vlseg/conv.hpp"
#include "vlseg/dataset.hpp"
#include "vlseg/errors.hpp"
#include "vlseg/fft.hpp"
#include "vlseg/gradcheck.hpp"
#include "vlseg/gradpoint.hpp"
#include "vlseg/loss.hpp"
#include "vlseg/metrics.hpp"
#include "vlseg/modab.hpp"
#include "vlseg/model.hpp"
#include "vlseg/opchecks.hpp"
#include "vlseg/ops.hpp"
#include "vlseg/optim.hpp"
#include "vlseg/pgm.hpp"
#include "vlseg/random.hpp"
#include "vlseg/ssmix.hpp"
#include "vlseg/summary.hpp"
#include "vlseg/synth.hpp"
#include "vlseg/tensor.hpp"
#include "vlseg/tensor_io.hpp"
#include "vlseg/trainer.hpp"
#include "vlseg/vocab.hpp"
