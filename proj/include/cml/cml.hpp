// Umbrella header.
#pragma once

#include "cml/autodiff.hpp"
#include "cml/data.hpp"
#include "cml/downsample.hpp"
#include "cml/gradcheck.hpp"
#include "cml/gradprobe.hpp"
#include "cml/kernels.hpp"
#include "cml/layers.hpp"
#include "cml/lif.hpp"
#include "cml/model.hpp"
#include "cml/surrogate.hpp"
#include "cml/tensor.hpp"
#include "cml/train.hpp"
