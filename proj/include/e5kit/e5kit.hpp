// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "e5kit/config.hpp"
#include "e5kit/contrastive.hpp"
#include "e5kit/datapipe.hpp"
#include "e5kit/encoder.hpp"
#include "e5kit/errors.hpp"
#include "e5kit/eval.hpp"
#include "e5kit/finetune.hpp"
#include "e5kit/io.hpp"
#include "e5kit/pipeline.hpp"
#include "e5kit/rng.hpp"
#include "e5kit/tensor.hpp"
