#pragma once

#include "ascood/autodiff.hpp"
#include "ascood/checkpoint.hpp"
#include "ascood/config.hpp"
#include "ascood/core.hpp"
#include "ascood/data.hpp"
#include "ascood/error.hpp"
#include "ascood/image_io.hpp"
#include "ascood/metrics.hpp"
#include "ascood/model.hpp"
#include "ascood/pipeline.hpp"
#include "ascood/postprocess.hpp"
#include "ascood/render.hpp"
#include "ascood/report.hpp"
#include "ascood/synthesis.hpp"
#include "ascood/tensor.hpp"
#include "ascood/training.hpp"
