// Copyright (C) 2026 The laserkv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "laserkv/baselines.hpp"
#include "laserkv/core.hpp"
#include "laserkv/error.hpp"
#include "laserkv/harness.hpp"
#include "laserkv/lsh.hpp"
#include "laserkv/pipeline.hpp"
#include "laserkv/rng.hpp"
#include "laserkv/scoring.hpp"
#include "laserkv/selection.hpp"
#include "laserkv/trace.hpp"
