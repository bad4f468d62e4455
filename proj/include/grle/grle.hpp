// Copyright 2026 The grle Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "grle/checkpoint.hpp"
#include "grle/data.hpp"
#include "grle/eval.hpp"
#include "grle/gradcheck.hpp"
#include "grle/losses.hpp"
#include "grle/metrics.hpp"
#include "grle/model.hpp"
#include "grle/ops.hpp"
#include "grle/optim.hpp"
#include "grle/parallel.hpp"
#include "grle/run_config.hpp"
#include "grle/tensor.hpp"
#include "grle/tokenizer.hpp"
#include "grle/trainer.hpp"
