import init, { Preview, ClusterEmbedding, channelNames } from "./pkg/pae_web.js";

const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);

function plotSeries(canvas, series, colors) {
  const ctx = canvas.getContext("2d");
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  const all = series.flat();
  let lo = Math.min(...all), hi = Math.max(...all);
  if (hi === lo) { hi += 1; lo -= 1; }
  const pad = 10;
  series.forEach((s, k) => {
    ctx.strokeStyle = colors[k];
    ctx.beginPath();
    s.forEach((v, i) => {
      const x = pad + (i / (s.length - 1)) * (canvas.width - 2 * pad);
      const y = canvas.height - pad - ((v - lo) / (hi - lo)) * (canvas.height - 2 * pad);
      i ? ctx.lineTo(x, y) : ctx.moveTo(x, y);
    });
    ctx.stroke();
  });
}

function drawGrid(canvas, mask, perChannel, selected) {
  const ctx = canvas.getContext("2d");
  const channels = mask.length / perChannel;
  const w = canvas.width / channels, h = canvas.height / perChannel;
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  for (let c = 0; c < channels; c++) {
    for (let j = 0; j < perChannel; j++) {
      ctx.fillStyle = mask[c * perChannel + j] ? "#333" : (c === selected ? "#cde" : "#eee");
      ctx.fillRect(c * w + 1, j * h + 1, w - 2, h - 2);
    }
  }
}

function refreshPreview() {
  try {
    const p = new Preview($("loc").value, num("size"), num("snr"), num("mask"), BigInt(num("seed")));
    const c = num("channel");
    plotSeries($("signal"), [Array.from(p.clean(c)), Array.from(p.corrupted(c))], ["#999", "#c22"]);
    drawGrid($("grid"), p.mask(), p.patchesPerChannel(), c);
    p.free();
    $("error").textContent = "";
  } catch (e) {
    $("error").textContent = String(e);
  }
}

function runTsne() {
  try {
    $("tsne-info").textContent = "running…";
    const e = new ClusterEmbedding(num("per"), num("sep"), num("perp"), num("iters"), 1n);
    const xy = e.coords(), labels = e.labels();
    const canvas = $("tsne"), ctx = canvas.getContext("2d");
    let lo = Infinity, hi = -Infinity;
    xy.forEach((v) => { lo = Math.min(lo, v); hi = Math.max(hi, v); });
    const scale = (v) => 15 + ((v - lo) / (hi - lo || 1)) * (canvas.width - 30);
    const palette = ["#1b9e77", "#d95f02", "#7570b3"];
    ctx.clearRect(0, 0, canvas.width, canvas.height);
    for (let i = 0; i < labels.length; i++) {
      ctx.fillStyle = palette[labels[i]];
      ctx.beginPath();
      ctx.arc(scale(xy[2 * i]), scale(xy[2 * i + 1]), 4, 0, 2 * Math.PI);
      ctx.fill();
    }
    $("tsne-info").textContent = `10-NN purity ${e.purity().toFixed(3)}, final KL ${e.finalKl().toFixed(4)}`;
    e.free();
    $("error").textContent = "";
  } catch (err) {
    $("error").textContent = String(err);
  }
}

await init();
const sel = $("channel");
channelNames().forEach((name, i) => sel.add(new Option(`${i}: ${name}`, i)));
["loc", "size", "snr", "mask", "seed", "channel"].forEach((id) => $(id).addEventListener("input", refreshPreview));
$("run").addEventListener("click", runTsne);
refreshPreview();
