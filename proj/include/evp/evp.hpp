#pragma once

#include "evp/tensor.hpp"
#include "evp/tape.hpp"
#include "evp/ops.hpp"
#include "evp/conv.hpp"
#include "evp/layers.hpp"
#include "evp/model.hpp"
#include "evp/serialize.hpp"
#include "evp/dataset.hpp"
#include "evp/attack.hpp"
#include "evp/trainer.hpp"
#include "evp/analysis.hpp"
#include "evp/config.hpp"
#include "evp/gradcheck.hpp"
#include "evp/parallel.hpp"
#include "evp/selftest.hpp"
