// Copyright (C) 2026 The tokprune Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "tokprune/attention_stats.hpp"
#include "tokprune/errors.hpp"
#include "tokprune/flops_model.hpp"
#include "tokprune/harness.hpp"
#include "tokprune/retention_schedule.hpp"
#include "tokprune/token_select.hpp"
#include "tokprune/trace_io.hpp"
